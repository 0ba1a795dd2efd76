"""Deterministic patch algebra.

Parse, render, apply and invert unified diffs; turn search/replace edit
blocks into patches; strip comments from added lines.  Everything here is a
pure function over immutable values: file trees are plain ``dict[str, str]``
mappings from repo-relative path to text, and applying a patch returns a new
tree without touching the input.
"""

from __future__ import annotations

import difflib
import logging
import re
from dataclasses import dataclass, replace

from .errors import (
    ApplyConflict,
    BinaryUnsupported,
    DiffParseError,
    EditNotFound,
    EmptyEdit,
    MissingTarget,
    SrParseError,
    Unsupported,
)

log = logging.getLogger(__name__)

FileTree = dict  # path -> text

DEV_NULL = "/dev/null"

TAG_CTX = " "
TAG_ADD = "+"
TAG_DEL = "-"


@dataclass(frozen=True)
class HunkLine:
    tag: str  # " ", "+" or "-"
    text: str
    no_newline: bool = False


@dataclass(frozen=True)
class Hunk:
    old_start: int
    old_len: int
    new_start: int
    new_len: int
    lines: tuple = ()

    def old_side(self):
        return [l for l in self.lines if l.tag in (TAG_CTX, TAG_DEL)]

    def new_side(self):
        return [l for l in self.lines if l.tag in (TAG_CTX, TAG_ADD)]


@dataclass(frozen=True)
class FilePatch:
    old_path: str
    new_path: str
    hunks: tuple = ()

    @property
    def path(self):
        """The path the patch effectively targets."""
        return self.new_path if self.old_path == DEV_NULL else self.old_path


@dataclass(frozen=True)
class Patch:
    files: tuple = ()

    def is_empty(self) -> bool:
        return not self.files

    def touched_paths(self) -> set:
        out = set()
        for fp in self.files:
            for p in (fp.old_path, fp.new_path):
                if p != DEV_NULL:
                    out.add(p)
        return out


# ---------------------------------------------------------------------------
# parsing / rendering
# ---------------------------------------------------------------------------

_HUNK_RE = re.compile(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@")
_SKIP_PREFIXES = (
    "diff --git",
    "index ",
    "new file mode",
    "deleted file mode",
    "old mode",
    "new mode",
    "similarity index",
    "rename from",
    "rename to",
)


def _strip_diff_path(raw: str) -> str:
    path = raw.split("\t")[0].strip()
    if path.startswith(("a/", "b/")):
        path = path[2:]
    return path


def parse_unified_diff(text: str) -> Patch:
    """Parse unified-diff text into a :class:`Patch`.

    Raises :class:`DiffParseError` on malformed input (including empty text)
    and :class:`BinaryUnsupported` on binary-file markers.
    """
    if not text.strip():
        raise DiffParseError("empty diff", 0)
    lines = text.split("\n")
    files = []
    i = 0
    n = len(lines)
    while i < n:
        line = lines[i]
        if line.startswith("Binary files") or line == "GIT binary patch":
            raise BinaryUnsupported(f"binary patch at line {i + 1}")
        if not line.startswith("--- "):
            i += 1
            continue
        old_path = _strip_diff_path(line[4:])
        if i + 1 >= n or not lines[i + 1].startswith("+++ "):
            raise DiffParseError("missing +++ header", i + 2)
        new_path = _strip_diff_path(lines[i + 1][4:])
        i += 2
        hunks = []
        while i < n and lines[i].startswith("@@"):
            m = _HUNK_RE.match(lines[i])
            if not m:
                raise DiffParseError("malformed hunk header", i + 1)
            old_start = int(m.group(1))
            old_len = int(m.group(2)) if m.group(2) is not None else 1
            new_start = int(m.group(3))
            new_len = int(m.group(4)) if m.group(4) is not None else 1
            i += 1
            body = []
            got_old = got_new = 0
            while i < n and (got_old < old_len or got_new < new_len):
                raw = lines[i]
                if raw.startswith("\\"):
                    # "\ No newline at end of file" qualifies the previous line
                    if not body:
                        raise DiffParseError("dangling no-newline marker", i + 1)
                    body[-1] = replace(body[-1], no_newline=True)
                    i += 1
                    continue
                tag = raw[:1] or TAG_CTX
                if tag not in (TAG_CTX, TAG_ADD, TAG_DEL):
                    raise DiffParseError("unexpected line in hunk", i + 1)
                body.append(HunkLine(tag, raw[1:]))
                if tag in (TAG_CTX, TAG_DEL):
                    got_old += 1
                if tag in (TAG_CTX, TAG_ADD):
                    got_new += 1
                i += 1
            if got_old != old_len or got_new != new_len:
                raise DiffParseError("hunk shorter than its header claims", i)
            # trailing marker for the very last hunk line
            if i < n and lines[i].startswith("\\"):
                body[-1] = replace(body[-1], no_newline=True)
                i += 1
            hunks.append(Hunk(old_start, old_len, new_start, new_len, tuple(body)))
        if not hunks:
            raise DiffParseError("file entry without hunks", i)
        _check_hunk_order(hunks, old_path, i)
        files.append(FilePatch(old_path, new_path, tuple(hunks)))
    if not files:
        raise DiffParseError("no file entries found", n)
    return Patch(tuple(files))


def _check_hunk_order(hunks, path, line_no):
    prev_end = -1
    for h in hunks:
        start = h.old_start if h.old_len == 0 else h.old_start - 1
        if start < prev_end:
            raise DiffParseError(f"overlapping hunks in {path}", line_no)
        prev_end = start + h.old_len


def render_patch(p: Patch) -> str:
    """Render a Patch back to unified-diff text (LF line endings)."""
    out = []
    for fp in p.files:
        old = fp.old_path if fp.old_path == DEV_NULL else "a/" + fp.old_path
        new = fp.new_path if fp.new_path == DEV_NULL else "b/" + fp.new_path
        out.append(f"--- {old}")
        out.append(f"+++ {new}")
        for h in fp.hunks:
            out.append(f"@@ -{h.old_start},{h.old_len} +{h.new_start},{h.new_len} @@")
            for hl in h.lines:
                out.append(hl.tag + hl.text)
                if hl.no_newline:
                    out.append("\\ No newline at end of file")
    return "\n".join(out) + "\n" if out else ""


# ---------------------------------------------------------------------------
# applying
# ---------------------------------------------------------------------------

def _split_content(content: str):
    if content == "":
        return [], True
    if content.endswith("\n"):
        return content.split("\n")[:-1], True
    return content.split("\n"), False


def _join_content(lines, final_nl: bool) -> str:
    if not lines:
        return ""
    return "\n".join(lines) + ("\n" if final_nl else "")


def _match_positions(target: int, lo: int, hi: int):
    """Yield candidate positions by growing distance from the target."""
    target = max(lo, min(target, hi))
    yield target
    for d in range(1, hi - lo + 1):
        if target + d <= hi:
            yield target + d
        if target - d >= lo:
            yield target - d


def _apply_hunks(lines, final_nl, hunks, fuzz, path):
    result = []
    pos = 0
    new_final = final_nl
    ends_at_eof_hunkline = None
    for idx, h in enumerate(hunks):
        old_side = h.old_side()
        new_side = h.new_side()
        target = h.old_start if h.old_len == 0 else h.old_start - 1
        placed = False
        for level in range(fuzz + 1):
            lead = min(level, _leading_ctx(h))
            trail = min(level, _trailing_ctx(h))
            if trail:
                core_old = [l.text for l in old_side[lead:len(old_side) - trail]]
                core_new = new_side[lead:len(new_side) - trail]
            else:
                core_old = [l.text for l in old_side[lead:]]
                core_new = new_side[lead:]
            hi = len(lines) - len(core_old)
            if hi < pos:
                continue
            for q in _match_positions(target + lead, pos, hi):
                if lines[q:q + len(core_old)] == core_old:
                    result.extend(lines[pos:q])
                    result.extend(l.text for l in core_new)
                    pos = q + len(core_old)
                    if pos == len(lines) and core_new:
                        ends_at_eof_hunkline = core_new[-1]
                    placed = True
                    break
            if placed:
                break
        if not placed:
            raise ApplyConflict(path, idx)
    tail = lines[pos:]
    result.extend(tail)
    if not tail and ends_at_eof_hunkline is not None:
        new_final = not ends_at_eof_hunkline.no_newline
    return result, new_final


def _leading_ctx(h: Hunk) -> int:
    n = 0
    for l in h.lines:
        if l.tag == TAG_CTX:
            n += 1
        else:
            break
    return n


def _trailing_ctx(h: Hunk) -> int:
    n = 0
    for l in reversed(h.lines):
        if l.tag == TAG_CTX:
            n += 1
        else:
            break
    return n


def apply_patch(tree: FileTree, p: Patch, fuzz: int = 0) -> FileTree:
    """Apply ``p`` to ``tree`` and return a new tree.

    All-or-nothing: if any hunk fails to place (after relaxing up to ``fuzz``
    context lines on each side), :class:`ApplyConflict` is raised and the
    input tree is unchanged.
    """
    new_tree = dict(tree)
    for fp in p.files:
        if fp.old_path == DEV_NULL:
            base = ""
        else:
            if fp.old_path not in new_tree:
                raise MissingTarget(fp.old_path)
            base = new_tree[fp.old_path]
        lines, final_nl = _split_content(base)
        out_lines, out_final = _apply_hunks(lines, final_nl, fp.hunks, fuzz, fp.path)
        if fp.new_path == DEV_NULL:
            new_tree.pop(fp.old_path, None)
            continue
        if fp.old_path != DEV_NULL and fp.old_path != fp.new_path:
            new_tree.pop(fp.old_path, None)
        new_tree[fp.new_path] = _join_content(out_lines, out_final)
    return new_tree


def invert_patch(p: Patch) -> Patch:
    """Swap added and deleted lines so the patch undoes itself."""
    inv_tag = {TAG_ADD: TAG_DEL, TAG_DEL: TAG_ADD, TAG_CTX: TAG_CTX}
    files = []
    for fp in p.files:
        hunks = []
        for h in fp.hunks:
            lines = tuple(HunkLine(inv_tag[l.tag], l.text, l.no_newline) for l in h.lines)
            hunks.append(Hunk(h.new_start, h.new_len, h.old_start, h.old_len, lines))
        files.append(FilePatch(fp.new_path, fp.old_path, tuple(hunks)))
    return Patch(tuple(files))


# ---------------------------------------------------------------------------
# diffing trees
# ---------------------------------------------------------------------------

def diff_trees(old_tree: FileTree, new_tree: FileTree, context: int = 3) -> Patch:
    """Produce the Patch that turns ``old_tree`` into ``new_tree``."""
    files = []
    for path in sorted(set(old_tree) | set(new_tree)):
        a = old_tree.get(path)
        b = new_tree.get(path)
        if a == b:
            continue
        a_lines, a_nl = _split_content(a or "")
        b_lines, b_nl = _split_content(b or "")
        sm = difflib.SequenceMatcher(None, a_lines, b_lines, autojunk=False)
        hunks = []
        for group in sm.get_grouped_opcodes(context):
            body = []
            for tag, i1, i2, j1, j2 in group:
                if tag == "equal":
                    for i in range(i1, i2):
                        body.append(HunkLine(TAG_CTX, a_lines[i], _last_no_nl(a_lines, a_nl, i)))
                else:
                    for i in range(i1, i2):
                        body.append(HunkLine(TAG_DEL, a_lines[i], _last_no_nl(a_lines, a_nl, i)))
                    for j in range(j1, j2):
                        body.append(HunkLine(TAG_ADD, b_lines[j], _last_no_nl(b_lines, b_nl, j)))
            old_len = sum(1 for l in body if l.tag != TAG_ADD)
            new_len = sum(1 for l in body if l.tag != TAG_DEL)
            i1 = group[0][1]
            j1 = group[0][3]
            hunks.append(Hunk(
                i1 + 1 if old_len else i1,
                old_len,
                j1 + 1 if new_len else j1,
                new_len,
                tuple(body),
            ))
        old_path = DEV_NULL if a is None else path
        new_path = DEV_NULL if b is None else path
        files.append(FilePatch(old_path, new_path, tuple(hunks)))
    return Patch(tuple(files))


def _last_no_nl(lines, final_nl, idx):
    return (not final_nl) and idx == len(lines) - 1


# ---------------------------------------------------------------------------
# search/replace edits
# ---------------------------------------------------------------------------

SEARCH_SENTINEL = "<<<<<<< SEARCH"
DIVIDER_SENTINEL = "======="
REPLACE_SENTINEL = ">>>>>>> REPLACE"


@dataclass(frozen=True)
class SearchReplaceEdit:
    file_path: str
    search_block: str
    replace_block: str

    def __post_init__(self):
        if not self.search_block:
            raise ValueError("search_block must be nonempty")
        if self.file_path.startswith("/") or ".." in self.file_path.split("/"):
            raise ValueError(f"path must be repo-relative: {self.file_path}")


def parse_sr_blocks(lm_output: str):
    """Extract search/replace edits from fenced code blocks in LM output.

    The file path is the first non-sentinel line of the block.  Unbalanced
    sentinels raise :class:`SrParseError` with the offending block index.
    """
    edits = []
    blocks = _fenced_blocks(lm_output)
    index = -1
    for block in blocks:
        if SEARCH_SENTINEL not in block:
            continue
        index += 1
        lines = block.split("\n")
        try:
            s = next(i for i, l in enumerate(lines) if l.strip() == SEARCH_SENTINEL)
        except StopIteration:
            raise SrParseError(index)
        path_lines = [l.strip() for l in lines[:s] if l.strip()]
        if not path_lines:
            raise SrParseError(index, "missing file path before SEARCH sentinel")
        path = path_lines[-1].strip("`").lstrip("#").strip()
        try:
            d = next(i for i in range(s + 1, len(lines)) if lines[i].strip() == DIVIDER_SENTINEL)
            r = next(i for i in range(d + 1, len(lines)) if lines[i].strip() == REPLACE_SENTINEL)
        except StopIteration:
            raise SrParseError(index)
        search = "\n".join(lines[s + 1:d])
        replace_text = "\n".join(lines[d + 1:r])
        if not search:
            raise SrParseError(index, "empty search block")
        try:
            edits.append(SearchReplaceEdit(path, search, replace_text))
        except ValueError as exc:
            raise SrParseError(index, str(exc))
    return edits


def _fenced_blocks(text: str):
    blocks = []
    current = None
    for line in text.split("\n"):
        stripped = line.strip()
        if current is None:
            if stripped.startswith("```"):
                current = []
        elif stripped == "```":
            blocks.append("\n".join(current))
            current = None
        else:
            current.append(line)
    return blocks


def edits_to_patch(tree: FileTree, edits) -> Patch:
    """Apply search/replace edits textually and return the equivalent Patch.

    Each search block must match a contiguous region of its file; when it
    matches more than once the first occurrence is used and a warning is
    logged.  The returned patch, applied to ``tree``, reproduces exactly the
    text-replacement result.
    """
    if not edits:
        raise EmptyEdit("no edits supplied")
    new_tree = dict(tree)
    for edit in edits:
        if edit.file_path not in new_tree:
            raise MissingTarget(edit.file_path)
        content = new_tree[edit.file_path]
        count = content.count(edit.search_block)
        if count == 0:
            raise EditNotFound(edit.file_path, edit.search_block[:80])
        if count > 1:
            log.warning(
                "search block matches %d locations in %s; using the first",
                count, edit.file_path,
            )
        new_tree[edit.file_path] = content.replace(edit.search_block, edit.replace_block, 1)
    return diff_trees(tree, new_tree)


# ---------------------------------------------------------------------------
# comment stripping
# ---------------------------------------------------------------------------

SUPPORTED_LANGUAGES = ("python", "rust", "go", "javascript")


def _scan_python(text: str, in_block: bool):
    quote = None
    i = 0
    while i < len(text):
        c = text[i]
        if quote:
            if c == "\\":
                i += 2
                continue
            if c == quote:
                quote = None
        elif c in "\"'":
            quote = c
        elif c == "#":
            return text[:i], True, False
        i += 1
    return text, False, False


def _scan_c_like(text: str, in_block: bool, quotes: str):
    code = []
    quote = None
    had_comment = in_block
    i = 0
    n = len(text)
    while i < n:
        c = text[i]
        if in_block:
            end = text.find("*/", i)
            if end == -1:
                return "".join(code), True, True
            i = end + 2
            in_block = False
            continue
        if quote:
            code.append(c)
            if c == "\\" and i + 1 < n:
                code.append(text[i + 1])
                i += 2
                continue
            if c == quote:
                quote = None
            i += 1
            continue
        if c in quotes:
            quote = c
            code.append(c)
            i += 1
            continue
        if text.startswith("//", i):
            return "".join(code), True, False
        if text.startswith("/*", i):
            had_comment = True
            in_block = True
            i += 2
            continue
        code.append(c)
        i += 1
    return "".join(code), had_comment, in_block


def _strip_line(text: str, language: str, in_block: bool):
    """Split one line into (code, had_comment, in_block_after)."""
    if language == "python":
        return _scan_python(text, in_block)
    if language in ("rust", "go"):
        return _scan_c_like(text, in_block, "\"'`" if language == "go" else "\"'")
    if language == "javascript":
        return _scan_c_like(text, in_block, "\"'`")
    raise Unsupported(language)


def strip_comments(p: Patch, language: str) -> Patch:
    """Remove comments from added lines.

    Pure-comment added lines are dropped; added lines with trailing comments
    keep their code.  Hunk headers are recomputed so the result still applies
    cleanly, and the operation is idempotent.  Only the four dataset
    languages are supported.
    """
    language = language.lower()
    if language not in SUPPORTED_LANGUAGES:
        raise Unsupported(language)
    files = []
    for fp in p.files:
        delta = 0
        hunks = []
        for h in fp.hunks:
            in_block = False
            body = []
            removed = 0
            for hl in h.lines:
                if hl.tag != TAG_ADD:
                    in_block = False
                    body.append(hl)
                    continue
                code, had_comment, in_block = _strip_line(hl.text, language, in_block)
                if had_comment and not code.strip():
                    removed += 1
                    continue
                new_text = code.rstrip() if had_comment else hl.text
                body.append(hl if new_text == hl.text else HunkLine(TAG_ADD, new_text, hl.no_newline))
            new_start = h.new_start - delta
            delta += removed
            if not any(l.tag != TAG_CTX for l in body):
                continue
            new_len = sum(1 for l in body if l.tag != TAG_DEL)
            hunks.append(Hunk(h.old_start, h.old_len, new_start, new_len, tuple(body)))
        if hunks:
            files.append(FilePatch(fp.old_path, fp.new_path, tuple(hunks)))
    return Patch(tuple(files))
