"""Command line front end.

Subcommands: ``generate`` (synthetic corpora), ``train``, ``evaluate``,
``calibrate``, ``report``.  Options resolve in three layers: built-in
defaults, then a flat key=value config file (``--config``), then explicit
flags.  The resolved configuration is echoed into every output directory
so each artifact records how it was produced.  The PROTOINFOMAX_OUT
environment variable supplies the default output root.

All artifact writers are deterministic: no timestamps, floats via repr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import evaluation as ev
from . import training as tr
from .corpus import EpisodeSpec, check_domain_disjoint, load_corpus, save_corpus
from .synthetic import SyntheticSpec, generate

# every key a config file may carry, with its parser
CONFIG_KEYS: dict[str, type] = {
    "model": str,
    "seed": int,
    "out": str,
    "train_corpus": str,
    "val_corpus": str,
    "test_corpus": str,
    "checkpoint": str,
    "epochs": int,
    "episodes_per_epoch": int,
    "batch_size": int,
    "learning_rate": float,
    "n_way": int,
    "k_shot": int,
    "n_id_queries": int,
    "n_ood_queries": int,
    "margin": float,
    "grad_clip": float,
    "d_emb": int,
    "hidden": int,
    "attn_queries": int,
    "max_len": int,
    "max_vocab": int,
    "n_bins": int,
    "n_train_domains": int,
    "n_val_domains": int,
    "n_test_domains": int,
    "classes_per_domain": int,
    "sentences_per_class": int,
    "vocab_size": int,
    "cluster_size": int,
    "overlap": float,
}


class ConfigError(ValueError):
    """Bad config file or flag combination."""


def parse_config_file(path) -> dict:
    """Flat key=value lines; '#' starts a comment.  All unknown keys and
    unparseable values are reported together."""
    values: dict[str, object] = {}
    problems: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                problems.append(f"line {line_no}: expected key=value, got {raw.strip()!r}")
                continue
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in CONFIG_KEYS:
                problems.append(f"line {line_no}: unknown key {key!r}")
                continue
            try:
                values[key] = CONFIG_KEYS[key](val)
            except ValueError:
                problems.append(
                    f"line {line_no}: value {val!r} for {key!r} is not {CONFIG_KEYS[key].__name__}"
                )
    if problems:
        raise ConfigError(f"{path}: " + "; ".join(problems))
    return values


def resolve_options(args: argparse.Namespace, keys) -> dict:
    """defaults < config file < flags, restricted to the listed keys."""
    resolved: dict[str, object] = {}
    file_values = parse_config_file(args.config) if getattr(args, "config", None) else {}
    for key in keys:
        if key in file_values:
            resolved[key] = file_values[key]
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
    return resolved


def _out_dir(resolved: dict) -> Path:
    out = resolved.get("out") or os.environ.get("PROTOINFOMAX_OUT") or "runs"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_config_echo(resolved: dict, out_dir: Path, command: str) -> None:
    lines = [f"command={command}"]
    lines += [f"{k}={resolved[k]}" for k in sorted(resolved)]
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _echoed(resolved: dict, command: str, out_dir: Path) -> dict:
    echo = dict(resolved)
    echo["out"] = str(out_dir)
    write_config_echo(echo, out_dir, command)
    return echo


# ------------------------------------------------------------------ commands

def cmd_generate(resolved: dict) -> Path:
    out_dir = _out_dir(resolved)
    spec_kwargs = {
        k: resolved[k]
        for k in (
            "n_train_domains", "n_val_domains", "n_test_domains", "classes_per_domain",
            "sentences_per_class", "vocab_size", "cluster_size", "overlap", "seed",
        )
        if k in resolved
    }
    data = generate(SyntheticSpec(**spec_kwargs))
    save_corpus(data.train, out_dir / "train.jsonl")
    save_corpus(data.val, out_dir / "val.jsonl")
    save_corpus(data.test, out_dir / "test.jsonl")
    _echoed(resolved, "generate", out_dir)
    return out_dir


def _train_config(resolved: dict) -> tr.TrainConfig:
    fields = (
        "model", "epochs", "episodes_per_epoch", "batch_size", "learning_rate", "seed",
        "n_way", "k_shot", "n_id_queries", "n_ood_queries", "margin", "grad_clip",
        "d_emb", "hidden", "attn_queries", "max_len", "max_vocab",
    )
    return tr.TrainConfig(**{k: resolved[k] for k in fields if k in resolved})


def cmd_train(resolved: dict) -> Path:
    for key in ("train_corpus", "val_corpus"):
        if key not in resolved:
            raise ConfigError(f"train needs {key}")
    out_dir = _out_dir(resolved)
    train_corpus = load_corpus(resolved["train_corpus"], "meta-train")
    val_corpus = load_corpus(resolved["val_corpus"], "meta-val")
    check_domain_disjoint(train_corpus, val_corpus)
    config = _train_config(resolved)
    result = tr.train(config, train_corpus, val_corpus)
    tr.save_checkpoint(result.checkpoint, out_dir / "checkpoint.bin")
    tr.save_epoch_log(result.log, out_dir / "epochs.csv")
    _echoed(resolved, "train", out_dir)
    if result.diverged:
        print("warning: loss diverged; kept the last good checkpoint", file=sys.stderr)
    return out_dir


def _eval_spec(resolved: dict, ckpt: tr.Checkpoint) -> EpisodeSpec:
    train_cfg = ckpt.train_config
    return EpisodeSpec(
        n_classes=resolved.get("n_way", train_cfg.get("n_way", 2)),
        k_shot=resolved.get("k_shot", train_cfg.get("k_shot", 10)),
        n_id_queries=resolved.get("n_id_queries", 50),
        n_ood_queries=resolved.get("n_ood_queries", 20),
        seed=resolved.get("seed", 0),
    )


def _scored_records(resolved: dict):
    for key in ("checkpoint", "test_corpus"):
        if key not in resolved:
            raise ConfigError(f"this command needs {key}")
    ckpt = tr.load_checkpoint(resolved["checkpoint"])
    test_corpus = load_corpus(resolved["test_corpus"], "meta-test")
    spec = _eval_spec(resolved, ckpt)
    records = ev.score_meta_test(
        ckpt.params, ckpt.assets, test_corpus, spec, seed=resolved.get("seed", 0)
    )
    # settle checkpoint-derived settings into the echo so report rows are full
    resolved.setdefault("model", ckpt.model)
    resolved["k_shot"] = spec.k_shot
    resolved["n_way"] = spec.n_classes
    resolved.setdefault("seed", 0)
    return records, ckpt


def cmd_evaluate(resolved: dict) -> Path:
    out_dir = _out_dir(resolved)
    records, _ = _scored_records(resolved)
    tau = ev.select_threshold(records).tau
    report = ev.compute_metrics(records, tau)
    cal_id = ev.calibration(records, kind="id")
    ev.save_predictions(records, out_dir / "predictions.csv")
    ev.save_metrics(report, out_dir / "metrics.json", ece=cal_id.ece)
    _echoed(resolved, "evaluate", out_dir)
    return out_dir


def cmd_calibrate(resolved: dict) -> Path:
    out_dir = _out_dir(resolved)
    records, _ = _scored_records(resolved)
    tau = ev.select_threshold(records).tau
    n_bins = resolved.get("n_bins", ev.N_BINS)
    cal_id = ev.calibration(records, kind="id", n_bins=n_bins)
    cal_ood = ev.calibration(records, kind="ood", tau=tau, n_bins=n_bins)
    ev.save_calibration_bins(cal_id, out_dir / "calibration_id_bins.csv")
    ev.save_calibration_bins(cal_ood, out_dir / "calibration_ood_bins.csv")
    payload = {
        "tau": tau,
        "id": {"n": cal_id.n, "ece": cal_id.ece, "avg_confidence": cal_id.avg_confidence,
               "accuracy": cal_id.accuracy},
        "ood": {"n": cal_ood.n, "ece": cal_ood.ece, "avg_confidence": cal_ood.avg_confidence,
                "accuracy": cal_ood.accuracy},
    }
    with open(out_dir / "calibration.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _echoed(resolved, "calibrate", out_dir)
    return out_dir


def cmd_report(resolved: dict, runs: list[str]) -> Path:
    """Consolidate per-run metrics.json files into one CSV and a markdown
    table; numbers byte-match the JSON they came from (repr round-trip)."""
    out_dir = _out_dir(resolved)
    rows = []
    for run in runs:
        run_path = Path(run)
        metrics_path = run_path / "metrics.json"
        if not metrics_path.exists():
            raise ConfigError(f"{run_path} has no metrics.json")
        with open(metrics_path, encoding="utf-8") as fh:
            metrics = json.load(fh)
        config = {}
        config_path = run_path / "config.txt"
        if config_path.exists():
            for line in config_path.read_text(encoding="utf-8").splitlines():
                k, _, v = line.partition("=")
                config[k] = v
        rows.append(
            {
                "run": run_path.name,
                "model": config.get("model", ""),
                "k_shot": config.get("k_shot", ""),
                "seed": config.get("seed", ""),
                "eer": metrics["eer"],
                "cer_id": metrics["cer_id"],
                "cer_all": metrics["cer_all"],
                "tau": metrics["tau"],
                "ece": metrics["ece"],
            }
        )
    rows.sort(key=lambda r: (r["model"], r["k_shot"], r["seed"], r["run"]))
    header = ["run", "model", "k_shot", "seed", "eer", "cer_id", "cer_all", "tau", "ece"]
    lines = [",".join(header)]
    for r in rows:
        lines.append(
            ",".join(
                str(r[h]) if h in ("run", "model", "k_shot", "seed") else repr(r[h])
                for h in header
            )
        )
    (out_dir / "report.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    md = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for r in rows:
        md.append(
            "| "
            + " | ".join(
                str(r[h]) if h in ("run", "model", "k_shot", "seed") else repr(r[h])
                for h in header
            )
            + " |"
        )
    (out_dir / "report.md").write_text("\n".join(md) + "\n", encoding="utf-8")
    _echoed(resolved, "report", out_dir)
    return out_dir


# --------------------------------------------------------------------- wiring

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--out", help="output directory (default: $PROTOINFOMAX_OUT or ./runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protoinfomax",
        description="few-shot text classification with out-of-domain detection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic train/val/test corpora")
    _add_common(p)
    for key in ("n_train_domains", "n_val_domains", "n_test_domains", "classes_per_domain",
                "sentences_per_class", "vocab_size", "cluster_size"):
        p.add_argument(f"--{key.replace('_', '-')}", type=int, dest=key)
    p.add_argument("--overlap", type=float)

    p = sub.add_parser("train", help="train a model on meta-train domains")
    _add_common(p)
    p.add_argument("--model", choices=("protonet", "oproto", "protoinfomax", "protoinfomaxpp"))
    p.add_argument("--train-corpus", dest="train_corpus")
    p.add_argument("--val-corpus", dest="val_corpus")
    p.add_argument("--k-shot", type=int, dest="k_shot")
    p.add_argument("--n-way", type=int, dest="n_way")
    for key in ("epochs", "episodes_per_epoch", "batch_size", "n_id_queries", "n_ood_queries",
                "d_emb", "hidden", "attn_queries", "max_len", "max_vocab"):
        p.add_argument(f"--{key.replace('_', '-')}", type=int, dest=key)
    for key in ("learning_rate", "margin", "grad_clip"):
        p.add_argument(f"--{key.replace('_', '-')}", type=float, dest=key)

    for name, help_text in (
        ("evaluate", "score a meta-test corpus and write metrics"),
        ("calibrate", "write reliability bins and calibration error"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        p.add_argument("--checkpoint")
        p.add_argument("--test-corpus", dest="test_corpus")
        p.add_argument("--model", choices=("protonet", "oproto", "protoinfomax", "protoinfomaxpp"),
                       help="informational; the checkpoint decides")
        p.add_argument("--k-shot", type=int, dest="k_shot")
        p.add_argument("--n-way", type=int, dest="n_way")
        p.add_argument("--n-id-queries", type=int, dest="n_id_queries")
        p.add_argument("--n-ood-queries", type=int, dest="n_ood_queries")
        if name == "calibrate":
            p.add_argument("--n-bins", type=int, dest="n_bins")

    p = sub.add_parser("report", help="consolidate run metrics into one table")
    _add_common(p)
    p.add_argument("runs", nargs="+", help="run directories containing metrics.json")
    return parser


_COMMAND_KEYS = {
    "generate": ("seed", "out", "n_train_domains", "n_val_domains", "n_test_domains",
                 "classes_per_domain", "sentences_per_class", "vocab_size", "cluster_size",
                 "overlap"),
    "train": ("seed", "out", "model", "train_corpus", "val_corpus", "epochs",
              "episodes_per_epoch", "batch_size", "learning_rate", "n_way", "k_shot",
              "n_id_queries", "n_ood_queries", "margin", "grad_clip", "d_emb", "hidden",
              "attn_queries", "max_len", "max_vocab"),
    "evaluate": ("seed", "out", "model", "checkpoint", "test_corpus", "n_way", "k_shot",
                 "n_id_queries", "n_ood_queries"),
    "calibrate": ("seed", "out", "model", "checkpoint", "test_corpus", "n_way", "k_shot",
                  "n_id_queries", "n_ood_queries", "n_bins"),
    "report": ("seed", "out"),
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        resolved = resolve_options(args, _COMMAND_KEYS[args.command])
        if args.command == "generate":
            out = cmd_generate(resolved)
        elif args.command == "train":
            out = cmd_train(resolved)
        elif args.command == "evaluate":
            out = cmd_evaluate(resolved)
        elif args.command == "calibrate":
            out = cmd_calibrate(resolved)
        else:
            out = cmd_report(resolved, args.runs)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
