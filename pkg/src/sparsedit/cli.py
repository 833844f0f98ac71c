"""Command-line driver: generation, editing, and edit-size sweeps.

Exit codes: 0 success, 1 internal/cache error, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cache import CacheStore, Role
from .errors import CacheMissError, ConfigError, ContractViolation
from .masks import centered_square_mask, mask_from_tensor, mask_to_tensor, save_mask_pgm
from .tensors import load_tensor, save_tensor
from .unet import EditSession, PromptTokens, UNet, UNetConfig, edit, generate_dense

MANIFEST_NAME = "manifest.json"
SPILL_NAME = "cache.bin"
LATENT_NAME = "final.ft4"


class UsageError(Exception):
    pass


def _config_hash(config: UNetConfig) -> str:
    blob = json.dumps(config.to_json(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class RunRecord:
    config_hash: str
    edit_size: float
    dense_macs: int
    sparse_macs: int
    macs_ratio: float | None
    dense_ms: float | None
    sparse_ms: float | None
    speedup: float | None
    cached_bytes_pre: int
    cached_bytes_post: int
    transfer_bytes: int
    blocking_loads: int

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class BenchReport:
    runs: list[RunRecord] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"runs": [r.to_json() for r in self.runs]}

    @classmethod
    def from_json(cls, data: dict) -> "BenchReport":
        """Load a report, recomputing and checking every derived ratio."""
        runs = []
        for raw in data["runs"]:
            rec = RunRecord(**raw)
            if rec.sparse_macs:
                expect = rec.dense_macs / rec.sparse_macs
                if rec.macs_ratio is None or not math.isclose(rec.macs_ratio, expect, rel_tol=1e-9):
                    raise ContractViolation(
                        f"macs_ratio {rec.macs_ratio} inconsistent with {expect}"
                    )
            if rec.dense_ms is not None and rec.sparse_ms:
                expect = rec.dense_ms / rec.sparse_ms
                if rec.speedup is None or not math.isclose(rec.speedup, expect, rel_tol=1e-9):
                    raise ContractViolation(f"speedup {rec.speedup} inconsistent with {expect}")
            runs.append(rec)
        return cls(runs)


def _make_record(config, edit_size, dense_macs, sparse_macs, dense_ms, sparse_ms, pre_bytes, stats):
    ratio = dense_macs / sparse_macs if sparse_macs else None
    speedup = (dense_ms / sparse_ms) if (dense_ms is not None and sparse_ms) else None
    return RunRecord(
        config_hash=_config_hash(config),
        edit_size=edit_size,
        dense_macs=dense_macs,
        sparse_macs=sparse_macs,
        macs_ratio=ratio,
        dense_ms=dense_ms,
        sparse_ms=sparse_ms,
        speedup=speedup,
        cached_bytes_pre=pre_bytes,
        cached_bytes_post=stats.total_bytes,
        transfer_bytes=stats.transfer_bytes,
        blocking_loads=stats.blocking_loads,
    )


def _load_json(path: Path, what: str) -> dict:
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{what} {path} is not valid JSON: {e}")


def _load_config(path: Path) -> UNetConfig:
    return UNetConfig.from_json(_load_json(path, "config"))


@dataclass
class SessionSpec:
    config: UNetConfig
    seed: int
    old_ids: list[int]
    new_ids: list[int]
    t1: int
    t2: int
    user_mask_path: str | None
    hot_budget: int | None
    prior_dir: Path


def _load_session(path: Path) -> SessionSpec:
    data = _load_json(path, "session")
    required = {"config", "old_tokens", "new_tokens", "prior_dir"}
    missing = required - set(data)
    if missing:
        raise UsageError(f"session {path} missing fields: {sorted(missing)}")
    config = UNetConfig.from_json(data["config"])
    prior = Path(data["prior_dir"])
    if not prior.is_absolute():
        prior = (path.parent / prior).resolve()
    spec = SessionSpec(
        config=config,
        seed=data.get("seed", config.seed),
        old_ids=list(data["old_tokens"]),
        new_ids=list(data["new_tokens"]),
        t1=data.get("t1", config.t1),
        t2=data.get("t2", config.t2),
        user_mask_path=data.get("user_mask"),
        hot_budget=data.get("hot_budget"),
        prior_dir=prior,
    )
    if spec.seed != config.seed:
        raise UsageError(f"session seed {spec.seed} disagrees with config seed {config.seed}")
    manifest_path = spec.prior_dir / MANIFEST_NAME
    manifest = _load_json(manifest_path, "prior manifest")
    if manifest["config"] != config.to_json():
        raise UsageError(f"session config disagrees with prior generation in {spec.prior_dir}")
    if list(manifest["prompt"]) != spec.old_ids:
        raise UsageError(
            f"session old_tokens {spec.old_ids} disagree with prior prompt {manifest['prompt']}"
        )
    return spec


def _open_prior_store(spec: SessionSpec, hot_budget) -> CacheStore:
    spill = spec.prior_dir / SPILL_NAME
    if not spill.is_file():
        raise UsageError(f"prior cache spill not found: {spill}")
    return CacheStore.open_spill(spill, hot_budget=hot_budget)


def _median_time(fn, repeats: int, warmup: int) -> tuple[float, object]:
    result = None
    for _ in range(warmup):
        result = fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = fn()
        samples.append((time.perf_counter() - t0) * 1000.0)
    return statistics.median(samples), result


# -- subcommands --------------------------------------------------------------


def cmd_generate(args) -> int:
    config = _load_config(Path(args.config))
    prompt = PromptTokens(tuple(args.prompt))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with CacheStore(spill_path=out / SPILL_NAME, async_transfer=False) as store:
        latent = generate_dense(prompt, config, store)
        save_tensor(out / LATENT_NAME, latent)
        step_latents = [
            {"step": k.step, "bytes": 4 * int(np.prod(latent.shape))}
            for k in sorted(store.keys())
            if k.role == Role.STEP_LATENT
        ]
        store.flush_all()
    unet = UNet(config)
    manifest = {
        "config": config.to_json(),
        "config_hash": _config_hash(config),
        "prompt": list(prompt.ids),
        "steps": config.steps,
        "step_latents": step_latents,
        "final_latent": LATENT_NAME,
        "spill": SPILL_NAME,
        "dense_step_macs": sum(unet.dense_step_macs(len(prompt.ids)).values()),
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))
    print(f"generated {config.steps} steps -> {out / LATENT_NAME}")
    return 0


def _resolve_user_mask(spec: SessionSpec, args, session_dir: Path):
    path = getattr(args, "user_mask", None) or spec.user_mask_path
    if path is None:
        return None
    p = Path(path)
    if not p.is_absolute():
        p = (session_dir / p).resolve()
    if not p.is_file():
        raise UsageError(f"user mask not found: {p}")
    return mask_from_tensor(load_tensor(p))


def cmd_edit(args) -> int:
    session_path = Path(args.session)
    spec = _load_session(session_path)
    config = spec.config
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.no_sparse:
        t0 = time.perf_counter()
        latent = generate_dense(PromptTokens(tuple(spec.new_ids)), config)
        dense_ms = (time.perf_counter() - t0) * 1000.0
        save_tensor(out / "edited.ft4", latent)
        unet = UNet(config)
        dense_macs = sum(unet.dense_step_macs(len(spec.new_ids)).values()) * config.steps
        report = BenchReport(
            [
                RunRecord(
                    config_hash=_config_hash(config),
                    edit_size=1.0,
                    dense_macs=dense_macs,
                    sparse_macs=dense_macs,
                    macs_ratio=1.0,
                    dense_ms=dense_ms,
                    sparse_ms=None,
                    speedup=None,
                    cached_bytes_pre=0,
                    cached_bytes_post=0,
                    transfer_bytes=0,
                    blocking_loads=0,
                )
            ]
        )
        (out / "report.json").write_text(json.dumps(report.to_json(), indent=2))
        print(f"dense regeneration -> {out / 'edited.ft4'}")
        return 0

    hot_budget = args.hot_budget if args.hot_budget is not None else spec.hot_budget
    user_mask = _resolve_user_mask(spec, args, session_path.parent)
    with _open_prior_store(spec, hot_budget) as store:
        pre_bytes = store.stats().total_bytes
        session = EditSession.create(
            spec.old_ids, spec.new_ids, config, store, user_mask=user_mask, t1=spec.t1, t2=spec.t2
        )
        t0 = time.perf_counter()
        result = edit(session, config, store)
        sparse_ms = (time.perf_counter() - t0) * 1000.0
        save_tensor(out / "edited.ft4", result.latent)
        if result.mask is not None:
            save_mask_pgm(out / "mask.pgm", result.mask)
            save_tensor(out / "mask.ft4", mask_to_tensor(result.mask))
        record = _make_record(
            config,
            result.mask.sparsity if result.mask is not None else 0.0,
            result.macs.dense_total,
            result.macs.sparse_total,
            None,
            sparse_ms,
            pre_bytes,
            result.cache_stats,
        )
        payload = {
            "runs": [record.to_json()],
            "no_edit": result.no_edit,
            "phase1_macs": result.phase1_macs,
            "phase2_macs": result.phase2_macs,
            "macs": result.macs.to_json(),
            "cache_stats": result.cache_stats.to_json(),
            "plans": {str(level): plan.to_json() for level, plan in result.plans.items()},
        }
        (out / "report.json").write_text(json.dumps(payload, indent=2))
    print(f"edited -> {out / 'edited.ft4'} (no_edit={result.no_edit})")
    return 0


def cmd_sweep(args) -> int:
    if not args.sizes:
        raise UsageError("sweep needs at least one edit size")
    for s in args.sizes:
        if not 0.0 < s <= 1.0:
            raise UsageError(f"edit sizes must be in (0, 1], got {s}")
    if args.repeats < 1 or args.warmup < 0:
        raise UsageError("need repeats >= 1 and warmup >= 0")
    spec = _load_session(Path(args.session))
    config = spec.config
    out_csv = Path(args.out)
    out_csv.parent.mkdir(parents=True, exist_ok=True)

    new_prompt = PromptTokens(tuple(spec.new_ids))
    dense_ms, _ = _median_time(
        lambda: generate_dense(new_prompt, config), repeats=args.repeats, warmup=args.warmup
    )
    unet = UNet(config)
    dense_macs = sum(unet.dense_step_macs(len(spec.new_ids)).values()) * config.steps

    report = BenchReport()
    for size in args.sizes:
        mask = centered_square_mask(config.latent_h, config.latent_w, size)

        def run_once():
            with _open_prior_store(spec, spec.hot_budget) as store:
                pre = store.stats().total_bytes
                session = EditSession.create(
                    spec.old_ids, spec.new_ids, config, store,
                    user_mask=mask, t1=spec.t1, t2=spec.t2,
                )
                result = edit(session, config, store)
                return pre, result

        sparse_ms, (pre_bytes, result) = _median_time(run_once, repeats=args.repeats, warmup=args.warmup)
        record = _make_record(
            config, size, result.macs.dense_total, result.macs.sparse_total,
            dense_ms, sparse_ms, pre_bytes, result.cache_stats,
        )
        report.runs.append(record)

    with open(out_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            [
                "edit_size", "dense_macs", "sparse_macs", "macs_ratio",
                "dense_ms", "sparse_ms", "speedup", "cached_bytes", "transfer_bytes",
            ]
        )
        for r in report.runs:
            writer.writerow(
                [
                    r.edit_size, r.dense_macs, r.sparse_macs,
                    "" if r.macs_ratio is None else repr(r.macs_ratio),
                    repr(r.dense_ms), repr(r.sparse_ms),
                    "" if r.speedup is None else repr(r.speedup),
                    r.cached_bytes_post, r.transfer_bytes,
                ]
            )
    out_csv.with_suffix(".json").write_text(json.dumps(report.to_json(), indent=2))
    print(f"sweep of {len(args.sizes)} sizes -> {out_csv}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparsedit", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="dense generation, caching every activation")
    g.add_argument("--config", required=True, help="path to a config JSON")
    g.add_argument("--prompt", required=True, type=int, nargs="+", help="token ids")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(fn=cmd_generate)

    e = sub.add_parser("edit", help="incremental edit against a cached generation")
    e.add_argument("--session", required=True, help="path to a session JSON")
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("--user-mask", default=None, help="mask fixture overriding detection")
    e.add_argument("--hot-budget", type=int, default=None, help="hot tier budget in bytes")
    e.add_argument("--no-sparse", action="store_true", help="dense regeneration baseline")
    e.set_defaults(fn=cmd_edit)

    s = sub.add_parser("sweep", help="edit-size sweep with synthetic square masks")
    s.add_argument("--session", required=True, help="path to a session JSON")
    s.add_argument("--sizes", required=True, type=float, nargs="*", help="mask area fractions")
    s.add_argument("--out", required=True, help="output CSV path")
    s.add_argument("--repeats", type=int, default=5, help="timing repetitions (median)")
    s.add_argument("--warmup", type=int, default=1, help="untimed warmup runs")
    s.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (CacheMissError, ContractViolation, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
