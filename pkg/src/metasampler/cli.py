"""Command-line surface.

Subcommands: ``gen-data``, ``train``, ``eval``, ``compare``, ``gradcheck``,
``dump-policy``.  Exit codes are a stable contract: 0 success, 2 usage error,
3 numerical failure or divergence.

Every run emits a manifest JSON (config echo, seed, dataset hash, timestamps,
output paths).  Metric outputs (CSV/JSON reports) are byte-identical across
re-runs with the same config and seed; the manifest's timestamps are the only
non-reproducible artifact.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import gradcheck, metrics, models, trainer
from . import policy as policy_mod
from .autodiff import NumericalError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _json_dumps(payload) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _write_manifest(path: Path, payload: dict, started: str) -> None:
    payload = dict(payload)
    payload["started"] = started
    payload["finished"] = datetime.now(timezone.utc).isoformat()
    path.write_text(_json_dumps(payload))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metasampler",
        description="Learned data-sampling policies for small embedding models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    g.add_argument("--identities", type=int, default=50)
    g.add_argument("--per-id", type=int, default=20)
    g.add_argument("--input-dim", type=int, default=16)
    g.add_argument("--distribution", choices=["uniform", "longtail"], default="uniform")
    g.add_argument("--zipf-exponent", type=float, default=1.2)
    g.add_argument("--spread", type=float, default=1.0)
    g.add_argument("--mode-offset", type=float, default=0.5)
    g.add_argument("--noise-std", type=float, default=0.35)
    g.add_argument("--hard-fraction", type=float, default=0.0)
    g.add_argument("--imbalance", type=float, default=None,
                   help="fraction of identities to down-sample (e.g. 0.9)")
    g.add_argument("--few-shot-n", type=int, default=5,
                   help="train samples kept per down-sampled identity")
    g.add_argument("--noise", type=float, default=None,
                   help="fraction of train labels to switch")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one model per a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out-dir", default=None, help="overrides out_dir from the config")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--dataset", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--cross-view", action="store_true")
    e.add_argument("--out", default=None)

    c = sub.add_parser("compare", help="run several samplers on one dataset")
    c.add_argument("--config", required=True)
    c.add_argument("--samplers", required=True,
                   help="comma-separated sampler kinds, e.g. uniform,learned")
    c.add_argument("--seeds", type=int, default=5, help="number of seeds")
    c.add_argument("--base-seed", type=int, default=0)
    c.add_argument("--out-dir", required=True)

    k = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    k.add_argument("--input-dim", type=int, default=3)
    k.add_argument("--hidden-dim", type=int, default=4)
    k.add_argument("--embed-dim", type=int, default=2)
    k.add_argument("--identities", type=int, default=3)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--break-meta", action="store_true",
                   help="negative control: detach a term and expect failure")

    d = sub.add_parser("dump-policy", help="write the current selection policy as CSV")
    d.add_argument("--dataset", required=True)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--out", required=True)
    return parser


def cmd_gen_data(args) -> int:
    started = _now()
    spec = data_mod.SynthSpec(
        num_identities=args.identities,
        samples_per_identity=args.per_id,
        distribution=args.distribution,
        zipf_exponent=args.zipf_exponent,
        input_dim=args.input_dim,
        center_spread=args.spread,
        mode_offset=args.mode_offset,
        noise_std=args.noise_std,
        hard_fraction=args.hard_fraction,
    )
    dataset = data_mod.generate_synthetic(spec, args.seed)
    if args.imbalance is not None:
        m = data_mod.few_shot_count(dataset.num_identities, args.imbalance)
        dataset = data_mod.apply_imbalance(dataset, m, args.few_shot_n)
    if args.noise is not None:
        dataset = data_mod.inject_label_noise(dataset, args.noise, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data_mod.save_dataset(dataset, out)
    hard_ids = [] if dataset.hard is None else [int(i) for i in np.flatnonzero(dataset.hard)]
    _write_manifest(
        out.with_suffix(out.suffix + ".manifest.json"),
        {
            "command": "gen-data",
            "config": {k: getattr(args, k) for k in vars(args) if k != "command"},
            "seed": args.seed,
            "dataset_sha256": _sha256(out),
            "outputs": [str(out)],
            "hard_sample_ids": hard_ids,
        },
        started,
    )
    print(f"wrote {out} ({len(dataset)} samples, {dataset.num_identities} identities)")
    return EXIT_OK


def _load_run_config(path: Path) -> tuple[dict, trainer.TrainConfig]:
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path}: invalid JSON ({exc})") from exc
    if not isinstance(payload, dict):
        raise UsageError(f"config {path}: expected a JSON object")
    meta_keys = {"dataset", "out_dir"}
    train_keys = {k: v for k, v in payload.items() if k not in meta_keys}
    try:
        config = trainer.TrainConfig.from_dict(train_keys)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"config {path}: {exc}") from exc
    if "dataset" not in payload:
        raise UsageError(f"config {path}: missing 'dataset' key")
    return payload, config


def _epoch_csv_text(rows: list[dict]) -> str:
    cols = ["epoch", "train_loss", "eval_loss_expected", "mAP", "rank1", "rank5",
            "policy_entropy"]
    lines = [",".join(cols)]
    for row in rows:
        lines.append(
            ",".join(
                str(row[c]) if c == "epoch" else repr(float(row[c])) for c in cols
            )
        )
    return "\n".join(lines) + "\n"


def _run_report(result: trainer.RunResult, dataset_path: str, dataset_hash: str) -> dict:
    return {
        "config": result.config.to_dict(),
        "dataset": dataset_path,
        "dataset_sha256": dataset_hash,
        "seed": result.config.seed,
        "status": result.status,
        "epochs": result.epoch_metrics,
        "final": result.final_metrics,
        "refreshes": result.refresh_log,
    }


def cmd_train(args) -> int:
    started = _now()
    payload, config = _load_run_config(Path(args.config))
    dataset_path = Path(payload["dataset"])
    if not dataset_path.exists():
        raise UsageError(f"dataset file not found: {dataset_path}")
    out_dir = Path(args.out_dir or payload.get("out_dir") or ".")
    dataset = data_mod.load_dataset(dataset_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = trainer.run(config, dataset)
    (out_dir / "metrics.csv").write_text(_epoch_csv_text(result.epoch_metrics))
    report = _run_report(result, str(dataset_path), _sha256(dataset_path))
    (out_dir / "report.json").write_text(_json_dumps(report))
    models.save_checkpoint(
        out_dir / "checkpoint.npz", result.model_config, result.model, result.sampler
    )
    _write_manifest(
        out_dir / "manifest.json",
        {
            "command": "train",
            "config": report["config"],
            "seed": config.seed,
            "dataset_sha256": report["dataset_sha256"],
            "outputs": [
                str(out_dir / name)
                for name in ("metrics.csv", "report.json", "checkpoint.npz")
            ],
        },
        started,
    )
    if result.status != "ok":
        print(f"run diverged; partial report in {out_dir}", file=sys.stderr)
        return EXIT_NUMERIC
    final = result.final_metrics
    print(
        f"done: mAP={final['mAP']:.4f} rank1={final['rank1']:.4f} "
        f"(report in {out_dir})"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt_path = Path(args.checkpoint)
    dataset_path = Path(args.dataset)
    if not ckpt_path.exists():
        raise UsageError(f"checkpoint not found: {ckpt_path}")
    if not dataset_path.exists():
        raise UsageError(f"dataset file not found: {dataset_path}")
    _, model, _sampler = models.load_checkpoint(ckpt_path)
    if model is None:
        raise UsageError(f"checkpoint {ckpt_path} holds no model weights")
    dataset = data_mod.load_dataset(dataset_path)
    if args.cross_view:
        report = metrics.evaluate_cross_view(dataset, model)
    else:
        report = metrics.evaluate_retrieval(dataset, model)
    text = _json_dumps(report)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_compare(args) -> int:
    started = _now()
    payload, base_config = _load_run_config(Path(args.config))
    samplers = [s.strip() for s in args.samplers.split(",") if s.strip()]
    if len(samplers) < 2:
        raise UsageError("compare needs at least two samplers")
    for kind in samplers:
        if kind not in trainer.SAMPLER_KINDS:
            raise UsageError(
                f"unknown sampler {kind!r}; valid kinds: {', '.join(trainer.SAMPLER_KINDS)}"
            )
    dataset_path = Path(payload["dataset"])
    if not dataset_path.exists():
        raise UsageError(f"dataset file not found: {dataset_path}")
    dataset = data_mod.load_dataset(dataset_path)
    dataset_hash = _sha256(dataset_path)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for kind in samplers:
        for offset in range(args.seeds):
            seed = args.base_seed + offset
            config = replace(base_config, sampler=kind, seed=seed)
            result = trainer.run(config, dataset)
            rows.append(
                {
                    "sampler": kind,
                    "seed": seed,
                    "status": result.status,
                    "mAP": result.final_metrics["mAP"],
                    "rank1": result.final_metrics["rank1"],
                    "rank5": result.final_metrics["rank5"],
                    "train_loss": result.final_metrics["train_loss"],
                }
            )
    medians = []
    for kind in samplers:
        cells = [r for r in rows if r["sampler"] == kind]
        medians.append(
            {
                "sampler": kind,
                "seed": "median",
                "status": "ok" if all(r["status"] == "ok" for r in cells) else "diverged",
                "mAP": float(np.median([r["mAP"] for r in cells])),
                "rank1": float(np.median([r["rank1"] for r in cells])),
                "rank5": float(np.median([r["rank5"] for r in cells])),
                "train_loss": float(np.median([r["train_loss"] for r in cells])),
            }
        )
    cols = ["sampler", "seed", "status", "mAP", "rank1", "rank5", "train_loss"]
    with open(out_dir / "comparison.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows + medians:
            writer.writerow({c: row[c] for c in cols})
    table = _render_table(rows + medians, cols)
    (out_dir / "comparison.txt").write_text(table)
    _write_manifest(
        out_dir / "manifest.json",
        {
            "command": "compare",
            "config": base_config.to_dict(),
            "samplers": samplers,
            "seeds": list(range(args.base_seed, args.base_seed + args.seeds)),
            "dataset_sha256": dataset_hash,
            "outputs": [str(out_dir / "comparison.csv"), str(out_dir / "comparison.txt")],
        },
        started,
    )
    print(table, end="")
    return EXIT_OK


def _render_table(rows: list[dict], cols: list[str]) -> str:
    def fmt(value):
        return f"{value:.4f}" if isinstance(value, float) else str(value)

    cells = [[fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    header = "  ".join(c.ljust(widths[i]) for i, c in enumerate(cols))
    sep = "  ".join("-" * w for w in widths)
    body = "\n".join("  ".join(row[i].ljust(widths[i]) for i in range(len(cols))) for row in cells)
    return f"{header}\n{sep}\n{body}\n"


def cmd_gradcheck(args) -> int:
    config = models.ModelConfig(
        input_dim=args.input_dim,
        hidden_dim=args.hidden_dim,
        embed_dim=args.embed_dim,
        num_identities=args.identities,
    )
    results = gradcheck.run_suite(config, seed=args.seed, break_meta=args.break_meta)
    all_ok = True
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        line = f"{res.name}: max rel err {res.max_error:.3e} {status}"
        if not res.passed:
            line += f" (worst coordinate {res.worst_coordinate})"
            all_ok = False
        print(line)
    if not all_ok:
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    print("all gradient checks passed")
    return EXIT_OK


def cmd_dump_policy(args) -> int:
    ckpt_path = Path(args.checkpoint)
    dataset_path = Path(args.dataset)
    if not ckpt_path.exists():
        raise UsageError(f"checkpoint not found: {ckpt_path}")
    if not dataset_path.exists():
        raise UsageError(f"dataset file not found: {dataset_path}")
    _, model, sampler = models.load_checkpoint(ckpt_path)
    if model is None or sampler is None:
        raise UsageError(f"checkpoint {ckpt_path} must hold model and sampler weights")
    dataset = data_mod.load_dataset(dataset_path)
    pol = trainer.refresh_policy(dataset, model, sampler)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    policy_mod.dump_policy_csv(pol, out)
    print(f"wrote {out} ({len(pol)} samples)")
    return EXIT_OK


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "gradcheck": cmd_gradcheck,
    "dump-policy": cmd_dump_policy,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (data_mod.DatasetFormatError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
