"""Operator command line: run synthesis, evaluate traces and annotations,
and check the environment.

Exit codes: 0 ok, 2 usage, 10 environment, 11 gateway/protocol, 12 empty
search. Configuration layers file < environment (TIKZSMITH_*) < flags, and
the effective snapshot lands in the run manifest.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
import re
import shutil
import sys
from pathlib import Path

import click
import yaml

from . import evalkit
from .embed import HttpEmbedClient, MockEmbedder, load_mock_embedder
from .errors import (
    EmptySearchError,
    EngineMissingError,
    GatewayError,
    ProtocolError,
    TikzsmithError,
)
from .harness import LatexHarness, StubHarness, probe_engine
from .policy import HttpPolicyClient, PolicyRequest, load_mock_policy
from .reward import DiagnosticsReward, SelfSimReward
from .search import SearchConfig, SearchMode, SearchTrace, run_search

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ENVIRONMENT = 10
EXIT_GATEWAY = 11
EXIT_EMPTY_SEARCH = 12

_DURATION_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*(h|m|s)?\s*$")


def parse_duration(text: str) -> float:
    match = _DURATION_RE.match(text)
    if not match:
        raise click.BadParameter(f"cannot parse duration {text!r} (try 600, 10m, 5s)")
    value = float(match.group(1))
    unit = match.group(2) or "s"
    return value * {"s": 1.0, "m": 60.0, "h": 3600.0}[unit]


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise click.BadParameter("config file must hold a key-value mapping")
    return data


def _env_overrides() -> dict:
    keys = ("mode", "budget", "c", "temperature", "policy", "embed", "engine", "seed")
    out = {}
    for key in keys:
        env = os.environ.get(f"TIKZSMITH_{key.upper()}")
        if env is not None:
            out[key] = env
    return out


def _resolve(flag_value, env_file: dict, key: str, default):
    if flag_value is not None:
        return flag_value
    if key in env_file:
        return env_file[key]
    return default


def _build_policy(spec: str):
    if spec.startswith("mock:"):
        path = spec[len("mock:"):]
        if path:
            return load_mock_policy(path)
        raise click.BadParameter("mock policy needs a spec file: mock:<file>")
    return HttpPolicyClient(spec)


def _build_embedder(spec: str | None):
    if spec is None or spec == "mock:":
        return MockEmbedder()
    if spec.startswith("mock:"):
        path = spec[len("mock:"):]
        if not path:
            return MockEmbedder()
        with open(path, "r", encoding="utf-8") as fh:
            return load_mock_embedder(yaml.safe_load(fh) or {})
    return HttpEmbedClient(spec)


def _build_harness(engine: str, timeout_s: float, dpi: int):
    if engine == "stub":
        return StubHarness()
    return LatexHarness(engine=engine, timeout_s=timeout_s, dpi=dpi)


@click.group()
def main():
    """Synthesize TikZ programs for images by tree search, and evaluate runs."""


@main.command()
@click.option("--mode", type=click.Choice(["oi", "ti"]), default=None)
@click.option("--image", "image_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--budget", default=None, help="Wall-clock budget (600, 10m, 5s); default 10m.")
@click.option("--c", "exploration_c", type=float, default=None, help="Exploration coefficient.")
@click.option("--temperature", type=float, default=None)
@click.option("--policy", default=None, help="Policy endpoint URL or mock:<spec.yaml>.")
@click.option("--embed", default=None, help="Embed endpoint URL or mock:[spec.yaml].")
@click.option("--engine", default=None, help="LaTeX engine binary, or 'stub'.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--trace-format", type=click.Choice(["jsonl"]), default="jsonl")
@click.option("--max-rollout-lines", type=int, default=None)
@click.option("--max-simulations", type=int, default=None)
@click.option("--compile-timeout", type=float, default=None)
@click.option("--dpi", type=int, default=None)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--force", is_flag=True, help="Allow writing into an existing run directory.")
def synthesize(
    mode,
    image_path,
    budget,
    exploration_c,
    temperature,
    policy,
    embed,
    engine,
    out_dir,
    seed,
    trace_format,
    max_rollout_lines,
    max_simulations,
    compile_timeout,
    dpi,
    config_path,
    force,
):
    """Run one search over an input image and write a self-describing run dir."""
    layered = {**_load_config_file(config_path), **_env_overrides()}
    mode = str(_resolve(mode, layered, "mode", "oi")).lower()
    budget_s = parse_duration(str(_resolve(budget, layered, "budget", "10m")))
    exploration_c = float(_resolve(exploration_c, layered, "c", 0.6))
    temperature = float(_resolve(temperature, layered, "temperature", 0.8))
    policy_spec = str(_resolve(policy, layered, "policy", ""))
    embed_spec = _resolve(embed, layered, "embed", None)
    engine = str(_resolve(engine, layered, "engine", os.environ.get("TIKZSMITH_ENGINE", "pdflatex")))
    seed = int(_resolve(seed, layered, "seed", 0))
    max_rollout_lines = int(_resolve(max_rollout_lines, layered, "max_rollout_lines", 150))
    compile_timeout = float(_resolve(compile_timeout, layered, "compile_timeout", 60.0))
    dpi = int(_resolve(dpi, layered, "dpi", 300))

    if not policy_spec:
        raise click.UsageError("--policy is required (URL or mock:<spec.yaml>)")

    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise click.UsageError(f"run directory {out} exists; pass --force to reuse it")
    out.mkdir(parents=True, exist_ok=True)

    image_bytes = Path(image_path).read_bytes()
    cfg = SearchConfig(
        mode=SearchMode(mode),
        exploration_c=exploration_c,
        temperature=temperature,
        budget_seconds=budget_s,
        max_rollout_lines=max_rollout_lines,
        compile_timeout_seconds=compile_timeout,
        raster_dpi=dpi,
        rng_seed=seed,
        max_simulations=max_simulations,
    )

    try:
        harness = _build_harness(engine, compile_timeout, dpi)
        policy_obj = _build_policy(policy_spec)
        if cfg.mode is SearchMode.OI:
            reward = DiagnosticsReward()
        else:
            reward = SelfSimReward(_build_embedder(embed_spec))
        started_at = _dt.datetime.now(_dt.timezone.utc)
        result = run_search(image_bytes, cfg, policy_obj, reward, harness)
        finished_at = _dt.datetime.now(_dt.timezone.utc)
    except EngineMissingError as exc:
        click.echo(f"environment error: {exc}", err=True)
        sys.exit(EXIT_ENVIRONMENT)
    except (GatewayError, ProtocolError) as exc:
        click.echo(f"gateway error: {exc}", err=True)
        sys.exit(EXIT_GATEWAY)
    except EmptySearchError as exc:
        click.echo(f"empty search: {exc}", err=True)
        sys.exit(EXIT_EMPTY_SEARCH)

    best_path = out / "best.tex"
    best_path.write_text(result.best.program_text + "\n", encoding="utf-8")
    (out / "trace.jsonl").write_text(result.trace.to_jsonl(), encoding="utf-8")
    if result.best.outcome is not None and result.best.outcome.raster is not None:
        result.best.outcome.raster.save(out / "best.png")

    manifest = {
        "image": {
            "path": str(Path(image_path).resolve()),
            "sha256": hashlib.sha256(image_bytes).hexdigest(),
        },
        "config": {
            "mode": cfg.mode.value,
            "exploration_c": cfg.exploration_c,
            "temperature": cfg.temperature,
            "budget_seconds": cfg.budget_seconds,
            "max_rollout_lines": cfg.max_rollout_lines,
            "compile_timeout_seconds": cfg.compile_timeout_seconds,
            "raster_dpi": cfg.raster_dpi,
            "rng_seed": cfg.rng_seed,
            "max_simulations": cfg.max_simulations,
        },
        "endpoints": {"policy": policy_spec, "embed": embed_spec, "engine": engine},
        "started_at": started_at.isoformat(),
        "finished_at": finished_at.isoformat(),
        "best_program": best_path.name,
        "best_reward": result.best.raw_reward,
        "exit_reason": result.exit_reason,
        "simulations": result.simulations,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    click.echo(
        f"best reward {result.best.raw_reward:+.4f} after {result.simulations} simulations "
        f"({result.exit_reason}); outputs in {out}"
    )
    sys.exit(EXIT_OK)


@main.group()
def eval():
    """Evaluate traces, annotation files, and generated programs."""


@eval.command()
@click.option("--trace", "trace_paths", multiple=True, required=True, type=click.Path(exists=True))
def mte(trace_paths):
    """Mean token efficiency over one or more run traces."""
    samples = [
        evalkit.trace_efficiency_sample(_read_trace(p)) for p in trace_paths
    ]
    click.echo(f"mte {evalkit.mte(samples):.6f}")


@eval.command()
@click.option("--trace", "trace_path", required=True, type=click.Path(exists=True))
@click.option("--budget", default="10m")
def mst(trace_path, budget):
    """Unique compiled programs per 10 minutes within the budget."""
    value = evalkit.mst(_read_trace(trace_path), parse_duration(budget))
    click.echo(f"mst {value:.6f}")


@eval.command()
@click.option("--annotations", "annotations_path", required=True, type=click.Path(exists=True))
def bws(annotations_path):
    """Best-worst-scaling score per item."""
    records = evalkit.load_annotations(annotations_path)
    scores = evalkit.bws_scores(evalkit.aggregate_annotations(records))
    for item, score in scores.items():
        click.echo(f"{item}\t{score:+.6f}")


@eval.command()
@click.option("--annotations", "annotations_path", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=0)
@click.option("--splits", type=int, default=100)
def shr(annotations_path, seed, splits):
    """Split-half reliability of the annotation file."""
    records = evalkit.load_annotations(annotations_path)
    value = evalkit.shr(evalkit.group_by_item(records), rng_seed=seed, n_splits=splits)
    click.echo(f"shr {value:.6f}")


@eval.command()
@click.option("--corpus", "corpus_paths", multiple=True, required=True, type=click.Path(exists=True))
@click.option("--generated", "generated_path", required=True, type=click.Path(exists=True))
@click.option("--n", "n_range", default="1..10", help="n-gram sizes, e.g. 1..10 or 2.")
def novelty(corpus_paths, generated_path, n_range):
    """Fraction of generated n-grams absent from the corpus, per n."""
    ns = _parse_range(n_range)
    corpus_tokens = [
        evalkit.tokenize_tex(Path(p).read_text(encoding="utf-8")) for p in corpus_paths
    ]
    index = evalkit.build_ngram_index(corpus_tokens, ns)
    generated = evalkit.tokenize_tex(Path(generated_path).read_text(encoding="utf-8"))
    for n, value in evalkit.ngram_novelty(generated, index, ns).items():
        click.echo(f"{n}\t{value:.6f}")


@eval.command()
@click.option("--pairs1", required=True, type=click.Path(exists=True))
@click.option("--pairs2", required=True, type=click.Path(exists=True))
def congruence(pairs1, pairs2):
    """Congruence coefficient between two figure/sketch embedding files."""
    set1 = _read_pairs(pairs1)
    set2 = _read_pairs(pairs2)
    click.echo(f"congruence {evalkit.congruence(set1, set2):.6f}")


@eval.command()
@click.option("--trace", "trace_path", required=True, type=click.Path(exists=True))
def trend(trace_path):
    """Log-linear trend of best-so-far reward over time."""
    slope, intercept = evalkit.reward_trend(_read_trace(trace_path))
    click.echo(f"slope {slope:.6f} intercept {intercept:.6f}")


@eval.command()
@click.option("--a", "path_a", required=True, type=click.Path(exists=True))
@click.option("--b", "path_b", required=True, type=click.Path(exists=True))
def ted(path_a, path_b):
    """Normalized token edit distance between two programs."""
    value = evalkit.tex_edit_distance(
        Path(path_a).read_text(encoding="utf-8"), Path(path_b).read_text(encoding="utf-8")
    )
    click.echo(f"ted {value:.6f}")


@main.command()
@click.option("--engine", default=None)
@click.option("--rasterizer", default=None)
@click.option("--policy", default=None, help="Policy endpoint URL or mock:<spec.yaml>.")
@click.option("--embed", default=None, help="Embed endpoint URL or mock:[spec.yaml].")
@click.option("--embed-dim", type=int, default=None, help="Expected embedding dimension.")
def doctor(engine, rasterizer, policy, embed, embed_dim):
    """Probe the engine, rasterizer, and gateways; print pass/fail per probe."""
    engine = engine or os.environ.get("TIKZSMITH_ENGINE", "pdflatex")
    rasterizer = rasterizer or os.environ.get("TIKZSMITH_RASTERIZER", "pdftoppm")
    env_failed = gateway_failed = False

    def report(name: str, ok: bool, detail: str = ""):
        click.echo(f"[{'ok' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else ""))

    ok = engine == "stub" or probe_engine(engine)
    report("engine", ok, engine)
    env_failed |= not ok

    ok = engine == "stub" or shutil.which(rasterizer) is not None
    report("rasterizer", ok, rasterizer)
    env_failed |= not ok

    probe_png = _one_pixel_png()
    if policy:
        try:
            pol = _build_policy(policy)
            ref = pol.register_image(probe_png)
            resp = pol.sample_continuation(
                PolicyRequest(image_ref=ref, prefix_lines=(), temperature=0.8, max_new_lines=1)
            )
            report("policy", True, f"eos={resp.eos} tokens={resp.tokens_used}")
        except TikzsmithError as exc:
            report("policy", False, str(exc))
            gateway_failed = True
    if embed is not None:
        try:
            embedder = _build_embedder(embed)
            if embed_dim is not None and hasattr(embedder, "expected_dim"):
                embedder.expected_dim = embed_dim
            emb = embedder.embed_image(probe_png)
            if embed_dim is not None and emb.dim != embed_dim:
                raise ProtocolError(f"embed dim {emb.dim} != configured {embed_dim}")
            report("embed", True, f"dim={emb.dim}")
        except TikzsmithError as exc:
            report("embed", False, str(exc))
            gateway_failed = True

    if env_failed:
        sys.exit(EXIT_ENVIRONMENT)
    if gateway_failed:
        sys.exit(EXIT_GATEWAY)
    sys.exit(EXIT_OK)


def _read_trace(path: str) -> SearchTrace:
    return SearchTrace.from_jsonl(Path(path).read_text(encoding="utf-8"))


def _parse_range(text: str) -> list[int]:
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(text)]


def _read_pairs(path: str) -> "evalkit.PairedEmbeddingSet":
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    return evalkit.PairedEmbeddingSet(
        figure_embs=data["figures"], sketch_embs=data["sketches"]
    )


def _one_pixel_png() -> bytes:
    import io

    from PIL import Image

    buf = io.BytesIO()
    Image.new("L", (8, 8), 128).save(buf, format="PNG")
    return buf.getvalue()


if __name__ == "__main__":
    main()
