"""Prompt templates shipped as text assets with ``{placeholder}`` slots."""

from importlib import resources


def load_prompt(name: str) -> str:
    return resources.files(__package__).joinpath(f"{name}.txt").read_text(encoding="utf-8")


def load_fewshot_statements() -> list:
    root = resources.files(__package__).joinpath("fewshot")
    return [
        entry.read_text(encoding="utf-8")
        for entry in sorted(root.iterdir(), key=lambda e: e.name)
        if entry.name.endswith(".txt")
    ]
