"""Train/evaluate orchestration shared by the CLI and the acceptance runner."""

from __future__ import annotations

import json
import math
import os
from pathlib import Path

import numpy as np
import torch

from . import augment as aug
from .backbone import BackboneConfig, SSSNet, load_params
from .config import RunConfig
from .metrics import score_records, score_volume, summarize
from .trainer import (AdamWState, CacheEntry, TrainConfig, TrainState, predict_volume,
                      run_step)
from .volumes import DatasetSplit, generate_synthetic_dataset, load_dataset


class NumericFailure(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


def model_config(cfg: RunConfig) -> BackboneConfig:
    return BackboneConfig(
        num_classes=cfg["data.num_classes"], widths=cfg["model.widths"],
        strides=cfg["model.strides"], stem_width=cfg["model.stem_width"],
        prompt_sigma=cfg["model.prompt_sigma"], use_dfe=cfg["model.use_dfe"])


def train_config(cfg: RunConfig) -> TrainConfig:
    crop = cfg["augment.crop_size"] or None
    weak = aug.WeakConfig(cfg["augment.scale_range"], cfg["augment.flip_prob"], crop)
    strong = aug.StrongConfig(
        cfg["augment.jitter_prob"], cfg["augment.brightness"], cfg["augment.contrast"],
        cfg["augment.gamma"], cfg["augment.gray_prob"], cfg["augment.blur_prob"],
        cfg["augment.blur_sigma"], cfg["augment.cutmix_prob"], cfg["augment.cutmix_area"],
        cfg["augment.cutmix_aspect"])
    return TrainConfig(
        steps=cfg["trainer.steps"], warmup_steps=cfg["trainer.warmup_steps"],
        peak_lr=cfg["trainer.peak_lr"], beta1=cfg["trainer.beta1"], beta2=cfg["trainer.beta2"],
        eps=cfg["trainer.eps"], weight_decay=cfg["trainer.weight_decay"],
        ema_max=cfg["trainer.ema_max"], labeled_batch=cfg["trainer.labeled_batch"],
        unlabeled_batch=cfg["trainer.unlabeled_batch"], prompt_prob=cfg["trainer.prompt_prob"],
        pseudo_source=cfg["trainer.pseudo_source"], dfe_pairing=cfg["trainer.dfe_pairing"],
        dropout_p=cfg["augment.dropout_p"], pcsw_enabled=cfg["pcsw.enabled"],
        tau=cfg["pcsw.tau"], per_class=cfg["pcsw.per_class"],
        strict_band=cfg["pcsw.strict_band"], refresh_every=cfg["trainer.refresh_every"],
        unsup_start=cfg["trainer.unsup_start"], weak=weak, strong=strong)


def build_split(cfg: RunConfig) -> DatasetSplit:
    if cfg["data.manifest"]:
        split = load_dataset(cfg["data.manifest"])
    else:
        split = generate_synthetic_dataset(
            cfg["data.seed"], cfg["data.count"],
            (cfg["data.slices"], cfg["data.height"], cfg["data.width"]),
            cfg["data.num_classes"], cfg["data.labeled_fraction"],
            test_count=cfg["data.test_count"])
    if split.num_classes != cfg["data.num_classes"]:
        raise ValueError(f"dataset has {split.num_classes} classes, config says "
                         f"{cfg['data.num_classes']}")
    return split


def _dtype(cfg: RunConfig):
    return torch.float64 if cfg["model.dtype"] == "float64" else torch.float32


def new_state(cfg: RunConfig) -> TrainState:
    return TrainState.create(model_config(cfg), cfg["run.seed"], _dtype(cfg))


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, state: TrainState, cfg: RunConfig) -> None:
    cache = None
    if state.cache is not None:
        cache = [None if c is None else {
            "pairs": list(c.pairs),
            "mask": torch.from_numpy(np.ascontiguousarray(c.prompt_mask)),
            "window": None if c.window is None else list(c.window)} for c in state.cache]
    blob = {
        "config_hash": cfg.hash(),
        "seed": state.seed,
        "step": state.step,
        "student": state.student.state_dict(),
        "teacher": state.teacher.state_dict(),
        "exp_avg": state.opt.exp_avg,
        "exp_avg_sq": state.opt.exp_avg_sq,
        "opt_count": state.opt.count,
        "rng": json.dumps(state.rng.bit_generator.state),
        "cache": cache,
    }
    tmp = Path(str(path) + ".tmp")
    torch.save(blob, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, cfg: RunConfig) -> TrainState:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("config_hash") != cfg.hash():
        raise CheckpointError(
            f"checkpoint {path} was written with config hash {blob.get('config_hash')}, "
            f"current config hash is {cfg.hash()}")
    state = new_state(cfg)
    state.student.load_state_dict(blob["student"])
    state.teacher.load_state_dict(blob["teacher"])
    state.opt = AdamWState(dict(blob["exp_avg"]), dict(blob["exp_avg_sq"]), blob["opt_count"])
    state.step = blob["step"]
    state.rng.bit_generator.state = json.loads(blob["rng"])
    if blob["cache"] is not None:
        state.cache = [None if c is None else CacheEntry(
            list(c["pairs"]), c["mask"].numpy(),
            None if c["window"] is None else tuple(c["window"])) for c in blob["cache"]]
    return state


def load_model(path, cfg: RunConfig, which: str = "teacher") -> SSSNet:
    """Model weights from a training checkpoint or a ``save_params`` file."""
    blob = torch.load(path, map_location="cpu", weights_only=True)
    model = SSSNet(model_config(cfg)).to(_dtype(cfg))
    if "tensors" in blob:
        load_params(path, model)
    else:
        if blob.get("config_hash") != cfg.hash():
            raise CheckpointError(f"checkpoint config hash {blob.get('config_hash')} "
                                  f"!= config {cfg.hash()}")
        model.load_state_dict(blob[which])
    return model.eval()


# --------------------------------------------------------------------------
# training


def _finite(x: float):
    return x if math.isfinite(x) else repr(x)


def metrics_record(report, step: int, cfg_hash: str, seed: int) -> dict:
    return {
        "step": step,
        "l_sup": _finite(report.l_sup),
        "l_unsup": _finite(report.l_unsup),
        "l_total": _finite(report.l_total),
        "l_head": _finite(report.l_head),
        "unsup_views": [_finite(v) for v in report.unsup_views],
        "lr": report.lr,
        "ema_momentum": report.ema_momentum,
        "dfe_similarity": report.dfe_similarity,
        "n_unlabeled": report.n_unlabeled,
        "skipped": report.skipped,
        "config_hash": cfg_hash,
        "seed": seed,
    }


def train(cfg: RunConfig, split: DatasetSplit | None = None, out_dir=None, *,
          resume: bool = False, stop_after: int | None = None, on_step=None) -> TrainState:
    """Run (or resume) training; with ``out_dir`` writes metrics.jsonl and checkpoints."""
    split = build_split(cfg) if split is None else split
    tcfg = train_config(cfg)
    out = Path(out_dir) if out_dir is not None else None
    stream = None
    state = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.dumps())
        ckpt = out / "checkpoint.pt"
        metrics_path = out / "metrics.jsonl"
        if resume:
            if not ckpt.exists():
                raise CheckpointError(f"--resume given but {ckpt} does not exist")
            state = load_checkpoint(ckpt, cfg)
            kept = []
            if metrics_path.exists():
                for line in metrics_path.read_text().splitlines():
                    if line and json.loads(line)["step"] < state.step:
                        kept.append(line + "\n")
            metrics_path.write_text("".join(kept))
        else:
            metrics_path.write_text("")
        stream = open(metrics_path, "a", encoding="utf-8")
    if state is None:
        state = new_state(cfg)

    skipped = 0
    end = tcfg.steps if stop_after is None else min(tcfg.steps, stop_after)
    every = cfg["run.checkpoint_every"]
    try:
        while state.step < end:
            step = state.step
            state, report = run_step(state, split, tcfg)
            skipped += report.skipped
            rec = metrics_record(report, step, cfg.hash(), cfg["run.seed"])
            if stream is not None:
                stream.write(json.dumps(rec) + "\n")
            if on_step is not None:
                on_step(rec)
            if skipped > cfg["run.max_skipped"]:
                raise NumericFailure(f"{skipped} non-finite steps (last at step {step}: "
                                     f"{report.reason})")
            if out is not None and every and state.step % every == 0:
                stream.flush()
                save_checkpoint(out / "checkpoint.pt", state, cfg)
    finally:
        if stream is not None:
            stream.close()
    if out is not None:
        save_checkpoint(out / "checkpoint.pt", state, cfg)
    return state


# --------------------------------------------------------------------------
# evaluation


def evaluate(model: SSSNet, cases, cfg: RunConfig, ids=None) -> tuple[list[dict], dict]:
    """Per-(case, class) records and their summary for ``(Volume3D, MaskVolume)`` cases."""
    scores = []
    for vol, mask in cases:
        pred = predict_volume(model, vol, pcsw_enabled=cfg["pcsw.enabled"], tau=cfg["pcsw.tau"],
                              per_class=cfg["pcsw.per_class"],
                              strict_band=cfg["pcsw.strict_band"],
                              use_prompts=cfg["eval.use_prompts"])
        scores.append(score_volume(pred, mask.labels, mask.num_classes, vol.voxel_spacing))
    ids = list(ids) if ids is not None else [f"case{i:03d}" for i in range(len(cases))]
    records = score_records(ids, scores)
    return records, summarize(records)


def split_cases(split: DatasetSplit, which: str):
    if which == "test":
        return split.test, split.test_ids
    if which == "labeled":
        return split.labeled, split.labeled_ids
    if which == "unlabeled":
        if not split.unlabeled_masks:
            raise ValueError("unlabeled split has no masks to score against")
        return list(zip(split.unlabeled, split.unlabeled_masks)), split.unlabeled_ids
    raise ValueError(f"unknown split {which!r}")


def run_cell(cfg: RunConfig, split: DatasetSplit | None = None, out_dir=None) -> dict:
    """Train then evaluate on the test split; returns the summary plus bookkeeping."""
    split = build_split(cfg) if split is None else split
    state = train(cfg, split, out_dir)
    model = state.teacher if cfg["eval.model"] == "teacher" else state.student
    cases, ids = split_cases(split, "test")
    records, summary = evaluate(model, cases, cfg, ids)
    result = {"config_hash": cfg.hash(), "seed": cfg["run.seed"], "summary": summary,
              "records": records}
    if out_dir is not None:
        Path(out_dir, "scores.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    return result
