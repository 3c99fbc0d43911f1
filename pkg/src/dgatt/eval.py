"""Identification metrics, the ablation harness, and attention/CAM exports."""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import pnm
from . import tensor as T
from .data import ProtocolSplit, RGBDSample, split_protocol
from .model import Model, ModelConfig, variant_config
from .optim import TrainConfig, stack_samples, train
from .tensor import Tape, Tensor


def worker_count() -> int:
    """Worker cap for batch-parallel evaluation; DGA_THREADS overrides."""
    cores = os.cpu_count() or 1
    env = os.environ.get("DGA_THREADS")
    if env:
        try:
            return max(1, min(int(env), cores))
        except ValueError:
            pass
    return cores


@dataclass
class EvalReport:
    per_set: dict[str, tuple[int, int]]  # variation -> (correct, total)

    def accuracy(self, probe_set: str) -> float:
        correct, total = self.per_set[probe_set]
        return correct / total

    @property
    def average(self) -> float:
        """Unweighted mean over probe sets."""
        return float(np.mean([self.accuracy(k) for k in self.per_set]))

    def rows(self):
        out = [(k, c, t, c / t) for k, (c, t) in sorted(self.per_set.items())]
        out.append(("average", "", "", self.average))
        return out


def write_eval_report(path, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("probe_set", "correct", "total", "accuracy"))
        for row in report.rows():
            writer.writerow(row)


def rank1(model, split: ProtocolSplit, samples: list[RGBDSample],
          batch_size: int = 32) -> EvalReport:
    """Closed-set identification: a probe is correct iff the arg-max logit
    is its identity; ties resolve to the lowest class index."""
    ncls = model.cfg.num_classes if hasattr(model, "cfg") else None
    top = max(s.identity for s in samples)
    if ncls is not None and top >= ncls:
        raise ValueError(f"dataset has identity {top} but the model covers [0, {ncls})")

    per_set: dict[str, tuple[int, int]] = {}
    pool_workers = worker_count()

    def eval_batch(batch):
        rgb, guidance, labels = stack_samples(batch, np.float32)
        needs_g = getattr(model, "cfg", None) is None or model.cfg.has_guidance
        logits = model.predict_logits(rgb, guidance if needs_g else None)
        return int(np.sum(np.argmax(logits, axis=1) == labels)), len(batch)

    for variation, idxs in sorted(split.probes.items()):
        batches = [[samples[i] for i in idxs[j:j + batch_size]]
                   for j in range(0, len(idxs), batch_size)]
        if pool_workers > 1 and len(batches) > 1:
            with ThreadPoolExecutor(max_workers=pool_workers) as pool:
                results = list(pool.map(eval_batch, batches))
        else:
            results = [eval_batch(b) for b in batches]
        correct = sum(c for c, _ in results)
        total = sum(n for _, n in results)
        per_set[variation] = (correct, total)
    return EvalReport(per_set=per_set)


# ---------------------------------------------------------------------------
# Grad-CAM and attention export
# ---------------------------------------------------------------------------

@dataclass
class Heatmap:
    values: np.ndarray  # (M, M) or upsampled (H, H), in [0, 1]


def _upsample_nearest(arr: np.ndarray, extent: int) -> np.ndarray:
    factor = extent // arr.shape[0]
    return np.repeat(np.repeat(arr, factor, axis=0), factor, axis=1)


def grad_cam(model: Model, sample: RGBDSample, class_index: int,
             layer: int = -1, upsample: bool = False) -> Heatmap:
    """Gradient-weighted activation map of one RGB conv block.

    Channel weights are the spatial means of d logit[class] / d feature map;
    the heatmap is the relu of the weighted channel sum, min-max normalized
    (an all-zero map stays zero).
    """
    if not 0 <= class_index < model.cfg.num_classes:
        raise ValueError(f"class {class_index} outside [0, {model.cfg.num_classes})")
    with Tape() as tape:
        f_rgb, f_g, rgb_blocks, _ = model.features(
            sample.rgb, sample.guidance if model.cfg.has_guidance else None)
        fmap = rgb_blocks[layer]
        out = model.head(f_rgb, f_g, include_aux=False, rgb_blocks=rgb_blocks)
        onehot = np.zeros((1, model.cfg.num_classes), dtype=out.logits.dtype)
        onehot[0, class_index] = 1.0
        score = T.mul(out.logits, Tensor(onehot)).sum()
        T.backward(tape, score)
        grad = tape.grad(fmap)[0]  # (M, M, K)

    acts = fmap.data[0]
    weights = grad.mean(axis=(0, 1))
    cam = np.maximum((acts * weights).sum(axis=-1), 0.0)
    peak = cam.max()
    if peak > 0:
        lo = cam.min()
        cam = (cam - lo) / (peak - lo) if peak > lo else np.ones_like(cam)
    if upsample:
        cam = _upsample_nearest(cam, model.cfg.backbone.input_extent)
    return Heatmap(values=cam)


def export_attention(model: Model, sample: RGBDSample, path,
                     upsample: bool = False) -> np.ndarray:
    """Write the attention map, min-max scaled to 0-255, as a PGM file."""
    out = model.forward(sample.rgb, sample.guidance if model.cfg.has_guidance else None,
                        include_aux=False)
    if out.attention is None:
        raise ValueError(f"variant {model.cfg.variant} has no attention map")
    weights = out.attention.data[..., 0]
    lo, hi = weights.min(), weights.max()
    if hi > lo:
        scaled = (weights - lo) / (hi - lo)
    else:
        scaled = np.zeros_like(weights)
    img = np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)
    if upsample:
        img = _upsample_nearest(img, model.cfg.backbone.input_extent)
    pnm.write_pgm(path, img)
    return img


def export_embeddings(model: Model, samples: list[RGBDSample], path) -> int:
    """One CSV row per sample: identity, then the pre-logit embedding values."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for s in samples:
            out = model.forward(s.rgb, s.guidance if model.cfg.has_guidance else None,
                                include_aux=False)
            writer.writerow([s.identity] + [repr(float(x)) for x in out.embedding.data])
    return len(samples)


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

@dataclass
class AblationRow:
    variant: str
    probe_set: str
    mean_acc: float
    std_acc: float
    seeds: int


def ablate(base_cfg: ModelConfig, samples: list[RGBDSample], split: ProtocolSplit,
           variants: list[str], seeds: list[int], train_cfg: TrainConfig,
           log=None) -> list[AblationRow]:
    """Train every (variant, seed) on the identical gallery split and report
    mean +/- population stddev of the probe accuracies."""
    if not seeds:
        raise ValueError("need at least one seed")
    gallery_samples = [samples[i] for i in split.gallery]
    rows: list[AblationRow] = []
    for variant in variants:
        per_set: dict[str, list[float]] = {}
        averages: list[float] = []
        for seed in seeds:
            cfg = variant_config(base_cfg, variant, seed=seed)
            model = Model(cfg)
            train(model, gallery_samples, replace(train_cfg, seed=seed))
            report = rank1(model, split, samples)
            for key in report.per_set:
                per_set.setdefault(key, []).append(report.accuracy(key))
            averages.append(report.average)
            if log is not None:
                log(f"{variant} seed {seed}: " + "  ".join(
                    f"{k}={report.accuracy(k):.3f}" for k in sorted(report.per_set)))
        for key in sorted(per_set):
            accs = np.array(per_set[key])
            rows.append(AblationRow(variant, key, float(accs.mean()),
                                    float(accs.std()), len(seeds)))
        avg = np.array(averages)
        rows.append(AblationRow(variant, "average", float(avg.mean()),
                                float(avg.std()), len(seeds)))
    return rows


def write_ablation_table(path, rows: list[AblationRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("variant", "probe_set", "mean_acc", "std_acc", "seeds"))
        for r in rows:
            writer.writerow((r.variant, r.probe_set, repr(r.mean_acc),
                             repr(r.std_acc), r.seeds))
