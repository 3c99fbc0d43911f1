"""Command-line entry point: synthesis, training, evaluation, ablation,
gradient checking, and the export utilities.

Configuration is a line-oriented ``key = value`` file; ``--set key=value``
flags override file values, and the effective configuration is echoed into
the output directory of every run that has one.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import report
from .data import DEFAULT_MIX, SynthConfig, load_manifest, split_protocol, synth_generate
from .eval import (
    ablate,
    export_attention,
    export_embeddings,
    grad_cam,
    rank1,
    write_ablation_table,
    write_eval_report,
)
from .gradcheck import model_gradcheck
from .kvconfig import format_kv, parse_bool, parse_kv_text
from .model import (
    Model,
    VARIANTS,
    config_from_kv,
    config_to_kv,
    count_model_params,
    full_scale_config,
    load_model,
    shape_summary,
    toy_config,
)
from .optim import TrainConfig, train
from .report import save_heatmap_figure

MODEL_KEYS = set(config_to_kv(toy_config()))
TRAIN_KEYS = {"lr0", "decay", "batch_size", "epochs", "seed"}
PROTOCOL_KEYS = {"protocol", "ratio", "protocol_seed", "train_on"}
KNOWN_KEYS = MODEL_KEYS | TRAIN_KEYS | PROTOCOL_KEYS

TRAIN_DEFAULTS = {"lr0": "1e-5", "decay": "0.9", "batch_size": "30",
                  "epochs": "50", "seed": "0"}
PROTOCOL_DEFAULTS = {"protocol": "neutral-gallery", "ratio": "0.5",
                     "protocol_seed": "0", "train_on": "all"}


class UsageError(ValueError):
    pass


def load_run_config(config_path, overrides) -> dict[str, str]:
    """File values + --set overrides on top of the documented defaults."""
    kv = dict(TRAIN_DEFAULTS)
    kv.update(PROTOCOL_DEFAULTS)
    kv.update(config_to_kv(toy_config()))
    kv = {k: str(v) for k, v in kv.items()}
    if config_path is not None:
        text = Path(config_path).read_text()
        file_kv = parse_kv_text(text)
        _reject_unknown(file_kv)
        kv.update(file_kv)
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        key = key.strip()
        _reject_unknown({key: value})
        kv[key] = value.strip()
    return kv


def _reject_unknown(kv) -> None:
    unknown = set(kv) - KNOWN_KEYS
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")


def train_config_from_kv(kv) -> TrainConfig:
    return TrainConfig(
        lr0=float(kv["lr0"]),
        decay=float(kv["decay"]),
        batch_size=int(kv["batch_size"]),
        epochs=int(kv["epochs"]),
        seed=int(kv["seed"]),
    )


def echo_config(kv, out_dir) -> Path:
    path = Path(out_dir) / "config.txt"
    ordered = {k: kv[k] for k in sorted(kv)}
    path.write_text(format_kv(ordered, header="effective configuration"))
    return path


def _split_from_kv(kv, samples):
    return split_protocol(samples, kv["protocol"], ratio=float(kv["ratio"]),
                          seed=int(kv["protocol_seed"]))


def _parse_mix(text):
    mix = {}
    for part in text.split(","):
        name, _, value = part.partition("=")
        mix[name.strip()] = float(value)
    return mix


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = SynthConfig(
        ids=args.ids,
        per_id=args.per_id,
        extent=args.extent,
        seed=args.seed,
        mix=_parse_mix(args.mix) if args.mix else dict(DEFAULT_MIX),
        guidance=args.guidance,
    )
    manifest = synth_generate(cfg, args.out)
    print(f"wrote {cfg.ids * cfg.per_id} samples under {args.out}")
    print(f"manifest: {manifest}")
    return 0


def cmd_train(args) -> int:
    kv = load_run_config(args.config, args.set)
    model_cfg = config_from_kv(kv)
    train_cfg = train_config_from_kv(kv)
    _, samples = load_manifest(args.data)
    if kv["train_on"] == "gallery":
        split = _split_from_kv(kv, samples)
        train_samples = [samples[i] for i in split.gallery]
    elif kv["train_on"] == "all":
        train_samples = samples
    else:
        raise UsageError(f"train_on must be all or gallery, got {kv['train_on']!r}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(kv, out)
    model = Model(model_cfg)
    history = train(model, train_samples, train_cfg,
                    metrics_path=out / "metrics.csv",
                    checkpoint_path=out / "model.dga",
                    log=print)
    report.save_training_curves(history, out / "curves.png")
    print(f"final train accuracy {history[-1].train_acc:.3f}; "
          f"artifacts under {out}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    _, samples = load_manifest(args.data)
    kv = dict(PROTOCOL_DEFAULTS)
    spec = args.protocol
    if spec.startswith("ratio"):
        parts = spec.split(":")
        kv["protocol"] = "ratio"
        if len(parts) > 1:
            kv["ratio"] = parts[1]
        if len(parts) > 2:
            kv["protocol_seed"] = parts[2]
    else:
        kv["protocol"] = spec
    split = _split_from_kv(kv, samples)
    result = rank1(model, split, samples)
    for name, _, _, acc in result.rows():
        print(f"{name:14s} {acc:.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_eval_report(out / "report.csv", result)
        report.save_eval_figure(result, out / "report.png")
        print(f"report written under {out}")
    return 0


def cmd_ablate(args) -> int:
    kv = load_run_config(args.config, args.set)
    base_cfg = config_from_kv(kv)
    train_cfg = train_config_from_kv(kv)
    variants = [v.strip() for v in args.variants.split(",")]
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise UsageError(f"unknown variant(s): {', '.join(bad)}")
    seeds = [int(s) for s in args.seeds.split(",")]
    _, samples = load_manifest(args.data)
    split = _split_from_kv(kv, samples)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(kv, out)
    rows = ablate(base_cfg, samples, split, variants, seeds, train_cfg, log=print)
    write_ablation_table(out / "ablation.csv", rows)
    report.save_ablation_figure(rows, out / "ablation.png")
    for r in rows:
        print(f"{r.variant:12s} {r.probe_set:12s} {r.mean_acc:.4f} +/- {r.std_acc:.4f}")
    print(f"table written under {out}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = None
    if args.config:
        kv = load_run_config(args.config, args.set)
        cfg = config_from_kv(kv)
        if cfg.dtype != "float64":
            raise UsageError("gradcheck needs dtype = float64 in the config")

    def progress(name, done, total):
        if args.verbose:
            print(f"  [{done:>6d}/{total}] {name}")

    rep = model_gradcheck(cfg, eps=args.eps, progress=progress)
    print(f"checked {rep.param_count} parameters at eps {rep.eps:g}")
    worst_name, worst = rep.worst
    print(f"max relative error {rep.max_rel_err:.3e} (worst: {worst_name})")
    if rep.max_rel_err < 1e-4:
        print("gradcheck PASS")
        return 0
    print("gradcheck FAIL (tolerance 1e-4)")
    return 1


def cmd_export_attention(args) -> int:
    model = load_model(args.model)
    _, samples = load_manifest(args.data)
    if not 0 <= args.index < len(samples):
        raise UsageError(f"--index {args.index} outside dataset of {len(samples)} samples")
    sample = samples[args.index]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    img = export_attention(model, sample, out, upsample=args.upsample)
    save_heatmap_figure(img / 255.0, out.with_suffix(".png"), rgb=sample.rgb,
                        title=f"attention, id {sample.identity} ({sample.variation})")
    print(f"attention map ({img.shape[0]}x{img.shape[1]}) -> {out}")
    return 0


def cmd_export_embeddings(args) -> int:
    model = load_model(args.model)
    _, samples = load_manifest(args.data)
    count = export_embeddings(model, samples, args.out)
    print(f"wrote {count} embeddings to {args.out}")
    return 0


def cmd_gradcam(args) -> int:
    model = load_model(args.model)
    _, samples = load_manifest(args.data)
    if not 0 <= args.index < len(samples):
        raise UsageError(f"--index {args.index} outside dataset of {len(samples)} samples")
    sample = samples[args.index]
    target = sample.identity if args.klass is None else args.klass
    heat = grad_cam(model, sample, target, layer=args.layer, upsample=args.upsample)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_heatmap_figure(heat.values, out, rgb=sample.rgb if args.upsample else None,
                        title=f"grad-cam class {target}")
    print(f"grad-cam heatmap -> {out}")
    return 0


def cmd_count_params(args) -> int:
    if args.full_scale is not None:
        cfg = full_scale_config(args.full_scale, variant=args.variant)
    else:
        if not args.config:
            raise UsageError("count-params needs --config or --full-scale")
        kv = load_run_config(args.config, args.set)
        cfg = config_from_kv(kv)
    n = count_model_params(cfg)
    print(f"variant {cfg.variant}: {n:,} parameters ({n / 1e6:.1f}M)")
    for name, shape in shape_summary(cfg).items():
        print(f"  {name:12s} {'x'.join(str(s) for s in shape)}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dgatt",
        description="Guidance-modality attention networks for face identification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic RGB + guidance dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--ids", type=int, required=True)
    p.add_argument("--per-id", type=int, required=True, dest="per_id")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--extent", type=int, default=64)
    p.add_argument("--guidance", choices=("depth", "thermal"), default="depth")
    p.add_argument("--mix", help="variation ratios, e.g. neutral=0.4,pose=0.3,occlusion=0.3")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rank-1 identification over a protocol split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", required=True,
                   help="neutral-gallery or ratio:R:SEED")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare model variants")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", default="baseline,model_a,proposed")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--config", help="optional float64 model config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-attention", help="write a sample's attention map as PGM")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--upsample", action="store_true")
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("export-embeddings", help="write pre-logit embeddings as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("gradcam", help="render a grad-cam heatmap figure")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--class", type=int, dest="klass")
    p.add_argument("--layer", type=int, default=-1)
    p.add_argument("--upsample", action="store_true")
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("count-params", help="parameter count and shape summary")
    p.add_argument("--config")
    p.add_argument("--full-scale", type=int, dest="full_scale",
                   help="use the published architecture with this many classes")
    p.add_argument("--variant", choices=VARIANTS, default="proposed")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_count_params)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
