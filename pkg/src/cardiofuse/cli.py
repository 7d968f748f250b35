"""Command-line entry point: ``cardiofuse <command> ...``.

Every command writes its outputs plus ``manifest.txt`` into ``--out``.
Exit status is 0 on success, 2 for bad input (files, configs, data) and 1
for anything unexpected.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import CardiofuseError, InputError, InvalidConfig
from .model import ModelConfig, build_model, count_flops, count_params, load_weights, parse_key_values, save_weights
from .preprocess import VARIANT_LENGTHS, PreprocessConfig, preprocess_corpus, preprocess_record, read_window_cache, write_window_cache
from .signal_io import Label, load_corpus, load_label_index, load_record
from .stream import DEFAULT_N, PROFILES, compare_energy, format_event_log, load_profile, recording_decision, simulate_stream, window_probabilities
from .train import FoldPlan, TrainConfig, cross_validate, fit, make_fold_plan, record_labels, sub_seed

log = logging.getLogger("cardiofuse")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT = 0, 1, 2

FOLD_KEYS = {"k": 5, "repeats": 10}


# ------------------------------------------------------------------ helpers

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _read_config(path) -> dict[str, str]:
    if path is None:
        return {}
    try:
        return parse_key_values(Path(path).read_text())
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise InvalidConfig(f"{path}: {exc}") from exc


def _split_config(kv: dict[str, str]):
    """Route flat keys to the training, preprocessing and fold settings."""
    train_keys = {f.name for f in fields(TrainConfig)}
    pre_keys = {f.name: f.type for f in fields(PreprocessConfig)}
    train, pre, folds = {}, {}, dict(FOLD_KEYS)
    for k, v in kv.items():
        try:
            if k in train_keys:
                train[k] = v
            elif k in pre_keys:
                pre[k] = int(v) if pre_keys[k] == "int" else float(v)
            elif k in folds:
                folds[k] = int(v)
            else:
                raise InvalidConfig(f"unknown config key {k!r}")
        except ValueError as exc:
            raise InvalidConfig(f"{k}: {exc}") from exc
    try:
        return TrainConfig.from_mapping(train), PreprocessConfig(**pre), folds
    except ValueError as exc:
        raise InvalidConfig(str(exc)) from exc


def _write(out: Path, name: str, data: bytes | str) -> Path:
    path = out / name
    if isinstance(data, str):
        data = data.encode()
    path.write_bytes(data)
    return path


def _manifest(args, out: Path, artifacts: list[Path], extra: dict | None = None):
    lines = [
        f"command={args.command}",
        f"version={__version__}",
        f"seed={args.seed}",
        f"argv={' '.join(sys.argv[1:]) if args.argv is None else ' '.join(args.argv)}",
        f"out={out}",
    ]
    for key in ("config", "dataset", "cache", "model_dir", "input", "profile"):
        val = getattr(args, key, None)
        if val is None:
            continue
        lines.append(f"{key}={val}")
        p = Path(val)
        if p.is_file():
            lines.append(f"{key}_sha256={_sha256(p)}")
    for k, v in (extra or {}).items():
        lines.append(f"{k}={v}")
    for a in artifacts:
        lines.append(f"artifact.{a.name}={_sha256(a)}")
    _write(out, "manifest.txt", "\n".join(lines) + "\n")


def _model_config(args) -> ModelConfig:
    return ModelConfig.variant(args.variant)


def _load_cache(path) -> list:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read cache {path}: {exc}") from exc
    return read_window_cache(data)


# ----------------------------------------------------------------- commands

def cmd_preprocess(args) -> int:
    _, pre_cfg, _ = _split_config(_read_config(args.config))
    if args.variant != pre_cfg.per_modality_len:
        pre_cfg = PreprocessConfig(args.variant, pre_cfg.window_s, pre_cfg.overlap_s, pre_cfg.epsilon)
    root = Path(args.dataset)
    if not root.is_dir():
        raise InputError(f"{root} is not a directory")
    records, excluded = load_corpus(root)
    if not records:
        raise InputError(f"no usable records under {root}")
    windows = []
    for rec in records:
        try:
            windows.extend(preprocess_record(rec, pre_cfg))
        except CardiofuseError as exc:
            raise type(exc)(f"{rec.record_id}: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cache = _write(out, "windows.fwin", write_window_cache(windows))
    n_abn = sum(1 for r in records if r.label == Label.ABNORMAL)
    summary = (
        f"records={len(records)}\nexcluded={len(excluded)}\nwindows={len(windows)}\n"
        f"normal_records={len(records) - n_abn}\nabnormal_records={n_abn}\n"
        f"per_modality_len={pre_cfg.per_modality_len}\n"
    )
    s = _write(out, "summary.txt", summary)
    print(summary, end="")
    _manifest(args, out, [cache, s])
    return EXIT_OK


def cmd_train(args) -> int:
    train_cfg, _, _ = _split_config(_read_config(args.config))
    train_cfg = replace(train_cfg, seed=args.seed)
    if args.quantized and train_cfg.qat_epochs == 0:
        train_cfg = replace(train_cfg, qat_epochs=10)
    windows = _load_cache(args.cache)
    model_cfg = _model_config(args)
    _check_width(windows, model_cfg)
    model, qm, history = fit(windows, train_cfg, model_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    arts = [
        _write(out, "model.cfg", model_cfg.to_text()),
        _write(out, "train.cfg", train_cfg.to_text()),
        _write(out, "weights.tnet", save_weights(model)),
        _write(out, "loss.csv", "epoch,loss\n" + "".join(f"{i},{v:.8f}\n" for i, v in enumerate(history))),
    ]
    if qm is not None:
        from .quant import save_quant_weights

        arts.append(_write(out, "weights_int8.tnet", save_quant_weights(qm)))
    print(f"trained {len(history)} epochs, final loss {history[-1] if history else float('nan'):.6f}")
    _manifest(args, out, arts)
    return EXIT_OK


def _check_width(windows, model_cfg):
    if not windows:
        raise InputError("window cache is empty")
    if len(windows[0].values) != model_cfg.input_width:
        raise InputError(
            f"cache windows are {len(windows[0].values)} wide but --variant {model_cfg.per_modality_len} "
            f"expects {model_cfg.input_width}"
        )


def cmd_crossval(args) -> int:
    train_cfg, _, folds = _split_config(_read_config(args.config))
    train_cfg = replace(train_cfg, seed=args.seed)
    if args.k is not None:
        folds["k"] = args.k
    if args.repeats is not None:
        folds["repeats"] = args.repeats
    windows = _load_cache(args.cache)
    model_cfg = _model_config(args)
    _check_width(windows, model_cfg)
    if args.fold_plan:
        plan = FoldPlan.from_text(Path(args.fold_plan).read_text())
    else:
        plan = make_fold_plan(record_labels(windows), folds["k"], folds["repeats"], sub_seed(args.seed, "folds"))
    report = cross_validate(windows, plan, train_cfg, model_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = report.table_row() + "\n"
    arts = [
        _write(out, "folds.txt", plan.to_text()),
        _write(out, "runs.csv", report.to_csv()),
        _write(out, "summary.txt", report.to_kv()),
    ]
    if report.quantized is not None:
        arts.append(_write(out, "runs_int8.csv", report.quantized.to_csv()))
        arts.append(_write(out, "summary_int8.txt", report.quantized.to_kv()))
        table += report.quantized.table_row() + "\n"
    arts.append(_write(out, "table.txt", table))
    print(table, end="")
    _manifest(args, out, arts, {"runs": len(report.runs)})
    return EXIT_OK


def _fmt_count(n: int) -> str:
    for div, suffix in ((1e6, "M"), (1e3, "K")):
        if n >= div:
            return f"{n / div:.2f}".rstrip("0").rstrip(".") + suffix
    return str(n)


def _cost(cfg: ModelConfig) -> tuple[int, int]:
    model = build_model(cfg)
    return count_params(model), count_flops(model).conv_linear


def cost_table(variants=VARIANT_LENGTHS) -> list[tuple[str, int, int]]:
    rows = []
    for n in variants:
        cfg = ModelConfig.variant(n)
        cfg.validate()
        rows.append((f"CNN {n}", *_cost(cfg)))
    rows.append(("MLP", *_cost(ModelConfig.mlp())))
    return rows


def cmd_cost(args) -> int:
    if args.config:
        try:
            cfg = ModelConfig.from_text(Path(args.config).read_text())
        except OSError as exc:
            raise InvalidConfig(f"cannot read {args.config}: {exc}") from exc
        cfg.validate()
        rows = [(f"{cfg.kind.upper()} {cfg.per_modality_len}", *_cost(cfg))]
    else:
        rows = cost_table()
    lines = ["model,params,flops"] + [f"{name},{p},{f}" for name, p, f in rows]
    text = "\n".join(lines) + "\n"
    for name, p, f in rows:
        print(f"{name}: {_fmt_count(p)} params ({p}), {_fmt_count(f)} FLOPs ({f})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _manifest(args, out, [_write(out, "cost.csv", text)])
    return EXIT_OK


def _load_inputs(path: Path, pre_cfg: PreprocessConfig):
    """(records or None, windows) from a cache, a dataset directory or a ``dir/record_id`` path."""
    if path.suffix == ".fwin":
        return None, _load_cache(path)
    if path.is_dir():
        records, _ = load_corpus(path)
    else:
        ref = path.parent / "REFERENCE.csv"
        if not (path.parent / f"{path.name}.hea").exists() or not ref.exists():
            raise InputError(f"{path} is neither a cache, a dataset directory nor a record")
        records = [load_record(path.parent, path.name, load_label_index(ref.read_text()))]
    return records, preprocess_corpus(records, pre_cfg)


def cmd_infer(args) -> int:
    mdir = Path(args.model_dir)
    try:
        model_cfg = ModelConfig.from_text((mdir / "model.cfg").read_text())
    except OSError as exc:
        raise InputError(f"{mdir} has no model.cfg: {exc}") from exc
    float_model = load_weights((mdir / "weights.tnet").read_bytes(), model_cfg) \
        if (mdir / "weights.tnet").exists() else None
    qm = None
    if (mdir / "weights_int8.tnet").exists():
        from .quant import load_quant_weights

        qm = load_quant_weights((mdir / "weights_int8.tnet").read_bytes(), model_cfg)
    if args.quantized and qm is None:
        raise InputError(f"{mdir} has no weights_int8.tnet (train with --quantized)")
    model = qm if args.quantized else float_model
    if model is None:
        raise InputError(f"{mdir} has no weights.tnet")

    pre_cfg = PreprocessConfig(per_modality_len=model_cfg.per_modality_len)
    records, windows = _load_inputs(Path(args.input), pre_cfg)
    _check_width(windows, model_cfg)
    by_rec: dict[str, list] = {}
    for w in windows:
        by_rec.setdefault(w.record_id, []).append(w)

    lines = ["record_id,label,decision,p_abnormal_mean,windows"]
    disagree = total = 0
    for rid in sorted(by_rec):
        x = np.stack([w.values for w in by_rec[rid]])
        p = window_probabilities(model, x)
        lines.append(f"{rid},{by_rec[rid][0].label.name},{recording_decision(p).name},"
                     f"{p[:, 1].mean():.6f},{len(x)}")
        if float_model is not None and qm is not None:
            a = window_probabilities(float_model, x).argmax(1)
            b = window_probabilities(qm, x).argmax(1)
            disagree += int((a != b).sum())
            total += len(x)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    arts = [_write(out, "decisions.csv", "\n".join(lines) + "\n")]
    extra = {"path": "int8" if args.quantized else "float", "N": args.N}
    if total:
        extra["float_int8_disagreement"] = f"{disagree / total:.6f}"
        print(f"float vs int8 window disagreement: {disagree}/{total} = {disagree / total:.4f}")
    if args.stream:
        if records is None:
            raise InputError("--stream needs recordings, not a window cache")
        log_lines = []
        for rec in records:
            events = simulate_stream(rec, model, args.N, cfg=pre_cfg)
            log_lines.append(f"# {rec.record_id}\n" + format_event_log(events))
        arts.append(_write(out, "events.log", "".join(log_lines)))
    print("\n".join(lines[1:]))
    _manifest(args, out, arts, extra)
    return EXIT_OK


def cmd_energy(args) -> int:
    profile = load_profile(args.profile) if args.profile else PROFILES[args.preset]
    report = compare_energy(profile)
    text = report.to_text()
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _manifest(args, out, [_write(out, "energy.txt", text)], {"preset": None if args.profile else args.preset})
    return EXIT_OK


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--variant", type=int, choices=VARIANT_LENGTHS, default=128,
                        help="samples per modality per window")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cardiofuse", description="ECG+PCG tiny-CNN toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("preprocess", parents=[common], help="dataset directory -> window cache")
    s.add_argument("dataset")
    s.set_defaults(func=cmd_preprocess, out_required=True)

    s = sub.add_parser("train", parents=[common], help="train on a window cache")
    s.add_argument("cache")
    s.add_argument("--quantized", action="store_true", help="also run QAT and export int8 weights")
    s.set_defaults(func=cmd_train, out_required=True)

    s = sub.add_parser("crossval", parents=[common], help="repeated k-fold cross-validation")
    s.add_argument("cache")
    s.add_argument("--k", type=int)
    s.add_argument("--repeats", type=int)
    s.add_argument("--fold-plan", help="reuse a fold plan written by a previous run")
    s.set_defaults(func=cmd_crossval, out_required=True)

    s = sub.add_parser("cost", parents=[common], help="parameter and FLOP table")
    s.set_defaults(func=cmd_cost, out_required=False)

    s = sub.add_parser("infer", parents=[common], help="classify recordings with a trained model")
    s.add_argument("model_dir")
    s.add_argument("input", help="window cache (.fwin), dataset directory or dir/record_id")
    s.add_argument("--quantized", action="store_true", help="use the int8 network")
    s.add_argument("--stream", action="store_true", help="also write a streaming event log")
    s.add_argument("--N", type=int, default=DEFAULT_N, help="majority vote window count")
    s.set_defaults(func=cmd_infer, out_required=True)

    s = sub.add_parser("energy", parents=[common], help="local inference vs radio streaming power")
    s.add_argument("profile", nargs="?", help="key=value cost profile")
    s.add_argument("--preset", choices=sorted(PROFILES), default="npu")
    s.set_defaults(func=cmd_energy, out_required=False)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.out_required and not args.out:
        parser.error(f"{args.command} needs --out")
    if getattr(args, "N", 1) < 1:
        parser.error("--N must be >= 1")
    try:
        return args.func(args)
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - last-resort reporting
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
