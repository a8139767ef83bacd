"""Compile candidate programs in isolated workspaces and classify the outcome.

The harness owns three responsibilities: wrapping bare TikZ fragments into a
compilable document, mapping the engine log onto the three status classes
(clean / recoverable / fatal), and rasterizing the produced document so the
perceptual rewards can look at it.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import shutil
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from PIL import Image

from .errors import EngineMissingError

log = logging.getLogger(__name__)

# Markers whose presence makes a log fatal regardless of other content.
FATAL_LOG_MARKERS = (
    "Fatal error occurred",
    "Emergency stop",
    "==> Fatal error",
)

# Synthetic log appended when the engine is killed on timeout. Contains a
# fatal marker so classify_log stays the single source of truth.
TIMEOUT_LOG_MARKER = "! ==> Fatal error occurred, compilation timed out (synthetic marker)."

_ERROR_LINE_RE = re.compile(r"^!", re.MULTILINE)
_CONTEXT_LINE_RE = re.compile(r"^l\.(\d+)", re.MULTILINE)

# Lines prepended to candidates that do not carry their own preamble.
WRAPPER_PREAMBLE = (
    "\\documentclass[tikz]{standalone}",
    "\\begin{document}",
)
WRAPPER_POSTAMBLE = ("\\end{document}",)


class CompileStatus(str, Enum):
    CLEAN_SUCCESS = "clean_success"
    RECOVERABLE_ERRORS = "recoverable_errors"
    FATAL_FAILURE = "fatal_failure"


@dataclass
class CompileOutcome:
    """Structured result of one compilation attempt.

    ``fatal_line`` is 1-based in the candidate program's own numbering and is
    only ever set for fatal failures.
    """

    status: CompileStatus
    artifact_produced: bool
    raster: Optional[Image.Image]
    log_text: str
    fatal_line: Optional[int] = None
    wall_time_s: float = 0.0

    def __post_init__(self):
        if self.status is CompileStatus.CLEAN_SUCCESS and not self.artifact_produced:
            raise ValueError("clean success requires an artifact")
        if self.status is CompileStatus.FATAL_FAILURE and self.raster is not None:
            raise ValueError("fatal failure cannot carry a raster")
        if self.fatal_line is not None and self.status is not CompileStatus.FATAL_FAILURE:
            raise ValueError("fatal_line is only meaningful for fatal failures")


def classify_log(
    log_text: str, artifact_produced: bool, *, preamble_lines: int = 0
) -> tuple[CompileStatus, Optional[int]]:
    """Map an engine log to a status class and an optional fatal source line.

    Total on arbitrary input. Fatal iff no artifact was produced or the log
    contains one of FATAL_LOG_MARKERS; recoverable iff an artifact exists and
    the log has error lines (starting with "!"); clean otherwise. The fatal
    line is taken from the first "l.<N>" context line after the first fatal
    marker and shifted by ``preamble_lines`` into candidate numbering; None
    when absent or when the shift leaves the candidate's range.
    """
    marker_pos = None
    for marker in FATAL_LOG_MARKERS:
        pos = log_text.find(marker)
        if pos != -1 and (marker_pos is None or pos < marker_pos):
            marker_pos = pos

    fatal = (not artifact_produced) or marker_pos is not None
    if fatal:
        fatal_line = None
        if marker_pos is not None:
            match = _CONTEXT_LINE_RE.search(log_text, marker_pos)
            if match:
                raw = int(match.group(1))
                mapped = raw - preamble_lines
                fatal_line = mapped if mapped >= 1 else None
        return CompileStatus.FATAL_FAILURE, fatal_line

    if _ERROR_LINE_RE.search(log_text):
        return CompileStatus.RECOVERABLE_ERRORS, None
    return CompileStatus.CLEAN_SUCCESS, None


def wrap_source(source: str) -> tuple[str, int]:
    """Wrap a bare fragment into a standalone document.

    Returns the full source and the number of preamble lines prepended (0 when
    the candidate already carries a \\documentclass).
    """
    if "\\documentclass" in source:
        return source, 0
    lines = list(WRAPPER_PREAMBLE) + source.split("\n") + list(WRAPPER_POSTAMBLE)
    return "\n".join(lines), len(WRAPPER_PREAMBLE)


def _candidate_line_count(source: str) -> int:
    return len(source.split("\n"))


class LatexHarness:
    """Runs the system LaTeX engine; one private workspace per call.

    A semaphore bounds concurrent engine processes (default 1, raise it for
    batch evaluation). The handle itself is shareable across threads.
    """

    def __init__(
        self,
        engine: str | None = None,
        rasterizer: str | None = None,
        *,
        timeout_s: float = 60.0,
        dpi: int = 300,
        max_concurrent: int = 1,
        keep_workspaces: bool = False,
    ):
        self.engine = engine or os.environ.get("TIKZSMITH_ENGINE", "pdflatex")
        self.rasterizer = rasterizer or os.environ.get("TIKZSMITH_RASTERIZER", "pdftoppm")
        self.timeout_s = timeout_s
        self.dpi = dpi
        self.keep_workspaces = keep_workspaces
        self._sema = threading.Semaphore(max_concurrent)
        if shutil.which(self.engine) is None:
            raise EngineMissingError(f"LaTeX engine not found: {self.engine!r}")

    def compile_program(
        self, source: str, timeout_s: float | None = None, dpi: int | None = None
    ) -> CompileOutcome:
        if not source:
            raise ValueError("empty source")
        timeout_s = self.timeout_s if timeout_s is None else timeout_s
        dpi = self.dpi if dpi is None else dpi
        full_source, preamble_lines = wrap_source(source)

        started = time.monotonic()
        workspace = tempfile.mkdtemp(prefix="tikzsmith-compile-")
        try:
            with self._sema:
                tex_path = os.path.join(workspace, "candidate.tex")
                with open(tex_path, "w", encoding="utf-8") as fh:
                    fh.write(full_source)
                timed_out = False
                try:
                    subprocess.run(
                        [self.engine, "-interaction=nonstopmode", "candidate.tex"],
                        cwd=workspace,
                        stdout=subprocess.DEVNULL,
                        stderr=subprocess.DEVNULL,
                        timeout=timeout_s,
                    )
                except subprocess.TimeoutExpired:
                    timed_out = True
                except OSError as exc:
                    raise EngineMissingError(f"engine failed to start: {exc}") from exc

                log_text = self._read_log(workspace)
                if timed_out:
                    log_text = log_text + "\n" + TIMEOUT_LOG_MARKER + "\n"
                pdf_path = os.path.join(workspace, "candidate.pdf")
                artifact = os.path.exists(pdf_path) and os.path.getsize(pdf_path) > 0

                status, fatal_line = classify_log(
                    log_text, artifact, preamble_lines=preamble_lines
                )
                raster = None
                if status is not CompileStatus.FATAL_FAILURE and artifact:
                    raster = self._rasterize(workspace, pdf_path, dpi)
                if status is CompileStatus.FATAL_FAILURE and fatal_line is None:
                    # Conservative fallback: memoize the longest prefix.
                    fatal_line = _candidate_line_count(source)
                if fatal_line is not None:
                    fatal_line = min(fatal_line, _candidate_line_count(source))
                return CompileOutcome(
                    status=status,
                    artifact_produced=artifact,
                    raster=raster,
                    log_text=log_text,
                    fatal_line=fatal_line if status is CompileStatus.FATAL_FAILURE else None,
                    wall_time_s=time.monotonic() - started,
                )
        finally:
            if self.keep_workspaces:
                log.info("keeping workspace %s", workspace)
            else:
                shutil.rmtree(workspace, ignore_errors=True)

    def _read_log(self, workspace: str) -> str:
        path = os.path.join(workspace, "candidate.log")
        if not os.path.exists(path):
            return ""
        with open(path, "r", encoding="utf-8", errors="replace") as fh:
            return fh.read()

    def _rasterize(self, workspace: str, pdf_path: str, dpi: int) -> Optional[Image.Image]:
        if shutil.which(self.rasterizer) is None:
            log.warning("rasterizer %r not found; raster omitted", self.rasterizer)
            return None
        out_prefix = os.path.join(workspace, "page")
        try:
            subprocess.run(
                [self.rasterizer, "-png", "-r", str(dpi), "-f", "1", "-l", "1", pdf_path, out_prefix],
                stdout=subprocess.DEVNULL,
                stderr=subprocess.DEVNULL,
                timeout=self.timeout_s,
                check=True,
            )
        except (subprocess.SubprocessError, OSError) as exc:
            log.warning("rasterization failed: %s", exc)
            return None
        for name in sorted(os.listdir(workspace)):
            if name.startswith("page") and name.endswith(".png"):
                with Image.open(os.path.join(workspace, name)) as img:
                    return img.convert("RGB").copy()
        return None


# Stub line markers: any candidate line containing one of these drives the
# stub's classification, letting search tests run without an engine.
STUB_FATAL_MARKER = "%!fatal"
STUB_SOFT_MARKER = "%!soft"


class StubHarness:
    """Rule-driven stand-in for the engine, for offline runs and tests.

    Classification: the first line containing STUB_FATAL_MARKER makes the
    outcome fatal at that line; otherwise any STUB_SOFT_MARKER line makes it
    recoverable; otherwise clean. Rasters are deterministic pseudo-images
    derived from the program hash.
    """

    def __init__(self, raster_size: tuple[int, int] = (48, 48)):
        self.raster_size = raster_size

    def compile_program(
        self, source: str, timeout_s: float | None = None, dpi: int | None = None
    ) -> CompileOutcome:
        if not source:
            raise ValueError("empty source")
        lines = source.split("\n")
        fatal_line = next(
            (i for i, ln in enumerate(lines, start=1) if STUB_FATAL_MARKER in ln), None
        )
        if fatal_line is not None:
            log_text = (
                f"! Stub error.\n"
                f"! ==> Fatal error occurred, no output produced (stub).\n"
                f"l.{fatal_line} {lines[fatal_line - 1]}\n"
            )
            return CompileOutcome(
                status=CompileStatus.FATAL_FAILURE,
                artifact_produced=False,
                raster=None,
                log_text=log_text,
                fatal_line=fatal_line,
            )
        soft = any(STUB_SOFT_MARKER in ln for ln in lines)
        status = CompileStatus.RECOVERABLE_ERRORS if soft else CompileStatus.CLEAN_SUCCESS
        log_text = "! Stub recoverable error.\n" if soft else "Stub output written.\n"
        return CompileOutcome(
            status=status,
            artifact_produced=True,
            raster=self._raster_for(source),
            log_text=log_text,
        )

    def _raster_for(self, source: str) -> Image.Image:
        digest = hashlib.sha256(source.encode("utf-8")).digest()
        w, h = self.raster_size
        data = bytes(digest[(x + y * w) % len(digest)] for y in range(h) for x in range(w))
        return Image.frombytes("L", (w, h), data).convert("RGB")


def probe_engine(engine: str) -> bool:
    return shutil.which(engine) is not None
