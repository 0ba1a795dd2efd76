import os

import pytest
import yaml

from taskmirror.model import load_gym_registry

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def load_tree(root):
    tree = {}
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = [d for d in dirnames if d != "__pycache__"]
        for name in filenames:
            full = os.path.join(dirpath, name)
            rel = os.path.relpath(full, root).replace(os.sep, "/")
            with open(full, encoding="utf-8") as fh:
                tree[rel] = fh.read()
    return tree


def write_config(tmp_path, **overrides):
    cfg = {
        "gyms_file": os.path.join(FIXTURES, "gyms.json"),
        "checkout_root": os.path.join(FIXTURES, "checkouts"),
        "github_fixture_dir": os.path.join(FIXTURES, "github"),
        "lm_mode": "scripted",
        "lm_script": os.path.join(FIXTURES, "scripted_lm.json"),
        "output_dir": str(tmp_path / "out"),
        "sampling_k": 1,
        "seed": 7,
    }
    cfg.update(overrides)
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


@pytest.fixture
def calc_tree():
    return load_tree(os.path.join(FIXTURES, "checkouts", "calc-gym"))


@pytest.fixture
def calc_gym():
    return load_gym_registry(os.path.join(FIXTURES, "gyms.json"))[0]
