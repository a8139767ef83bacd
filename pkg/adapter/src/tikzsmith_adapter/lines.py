"""Newline buffering: the engine-facing side only ever sees complete lines."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass
class LineBatch:
    lines: list[str]
    eos: bool


def split_generated_text(text: str, eos_reached: bool, max_new_lines: int) -> LineBatch:
    """Turn raw sampled text into at most max_new_lines complete lines.

    A trailing fragment without a newline only counts as a line when the
    model's end marker closed the sequence (there is nothing more to wait
    for). When the line budget is reached before the end marker, the batch is
    non-final even if more text was sampled. CR/LF variants normalize to a
    single separator so no served line ever carries one.
    """
    text = text.replace("\r\n", "\n").replace("\r", "\n")
    parts = text.split("\n")
    complete = parts[:-1]
    trailing = parts[-1]

    if eos_reached and trailing:
        complete = complete + [trailing]
        trailing = ""

    if len(complete) >= max_new_lines:
        served = complete[:max_new_lines]
        eos = eos_reached and len(complete) == max_new_lines and not trailing
        return LineBatch(lines=served, eos=eos)
    if eos_reached:
        return LineBatch(lines=complete, eos=True)
    # token budget ran out mid-line: flush the fragment rather than stall
    if trailing:
        complete = complete + [trailing]
    return LineBatch(lines=complete, eos=False)
