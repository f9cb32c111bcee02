"""Weak-to-strong semi-supervised training with an EMA teacher.

One step: sample labeled frame pairs and unlabeled frame pairs, weakly augment
them, let the teacher label the weak unlabeled views (softmax + argmax), build
two strong views per unlabeled image, run the student on both strong views
through complementary dropout and DFE, then update with AdamW on
``L = L_sup + L_unsup`` and refresh the teacher by EMA.

Unlabeled volumes are gated by PCSW: every ``refresh_every`` steps the teacher's
pseudo-mask head labels each unlabeled volume, and only volumes with a valid
window contribute frames (taken from inside that window) and prompts.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import augment as aug
from .backbone import BackboneConfig, SSSNet
from .pcsw import (PromptSet, PseudoMaskVolume, predict_pseudo_masks, prompts_from_labels,
                   select_valid_window)
from .volumes import DatasetSplit, Volume3D, extract_frame_pair, target_pairs


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 400
    warmup_steps: int = 20
    peak_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    ema_max: float = 0.999
    labeled_batch: int = 2
    unlabeled_batch: int = 2
    prompt_prob: float = 0.5
    pseudo_source: str = "teacher"   # "teacher" | "student"
    dfe_pairing: str = "strong"      # "strong": (s1, s2); "weak": (w, s_k) per view
    dropout_p: float = 0.5
    pcsw_enabled: bool = True
    tau: float = 0.8
    per_class: bool = True
    strict_band: bool = False
    refresh_every: int = 50
    unsup_start: int = 0             # labeled-only burn-in steps before the unlabeled branch
    weak: aug.WeakConfig = aug.WeakConfig()
    strong: aug.StrongConfig = aug.StrongConfig()

    def __post_init__(self):
        if self.pseudo_source not in ("teacher", "student"):
            raise ValueError(f"pseudo_source must be 'teacher' or 'student', got {self.pseudo_source}")
        if self.dfe_pairing not in ("strong", "weak"):
            raise ValueError(f"dfe_pairing must be 'strong' or 'weak', got {self.dfe_pairing}")
        if self.warmup_steps >= max(self.steps, 1) and self.steps > 0:
            raise ValueError("warmup_steps must be smaller than steps")


# --------------------------------------------------------------------------
# losses


def _check_labels(labels: torch.Tensor, k: int):
    if labels.numel() and (int(labels.max()) >= k or int(labels.min()) < 0):
        raise ValueError(f"labels must lie in [0, {k - 1}]")


def supervised_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean pixelwise cross-entropy of ``softmax(logits)`` (``B x K x H x W``) against labels."""
    _check_labels(labels, logits.shape[1])
    return F.cross_entropy(logits, labels.long(), reduction="mean")


@torch.no_grad()
def make_pseudo_labels(logits: torch.Tensor) -> torch.Tensor:
    """Hard labels via softmax + argmax; ties go to the lowest class index."""
    return torch.softmax(logits.detach(), dim=1).argmax(dim=1)


def unsupervised_loss(pseudo, logits_sf1: torch.Tensor, logits_sf2: torch.Tensor) -> torch.Tensor:
    """Average of the two strong views' cross-entropies against the pseudo-labels.

    ``pseudo`` is one label map for both views or a ``(pseudo_1, pseudo_2)``
    pair when CutMix mixed the labels differently per view.
    """
    p1, p2 = pseudo if isinstance(pseudo, (tuple, list)) else (pseudo, pseudo)
    if logits_sf1.shape != logits_sf2.shape:
        raise ValueError("strong-view logits differ in shape")
    if p1.shape != logits_sf1.shape[:1] + logits_sf1.shape[2:] or p2.shape != p1.shape:
        raise ValueError(f"pseudo-labels {tuple(p1.shape)} do not match logits {tuple(logits_sf1.shape)}")
    if logits_sf1.shape[0] == 0:
        return logits_sf1.sum() * 0.0
    ce1 = F.cross_entropy(logits_sf1, p1.long(), reduction="mean")
    ce2 = F.cross_entropy(logits_sf2, p2.long(), reduction="mean")
    return 0.5 * (ce1 + ce2)


# --------------------------------------------------------------------------
# schedules and optimizer


def lr_schedule(step: int, total_steps: int, warmup_steps: int, peak_lr: float = 1e-4) -> float:
    """Linear warm-up from 0 to ``peak_lr``, then cosine decay to 0 at ``total_steps``."""
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / span, 1.0)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def ema_momentum(step: int, m_max: float = 0.999) -> float:
    return min(1.0 - 1.0 / (step + 1), m_max)


@torch.no_grad()
def ema_update(teacher: SSSNet, student: SSSNet, momentum: float) -> SSSNet:
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {momentum}")
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys() or any(
            t_params[k].shape != s_params[k].shape for k in t_params):
        raise ValueError("teacher and student parameter schemas differ")
    for k, t in t_params.items():
        t.mul_(momentum).add_(s_params[k], alpha=1.0 - momentum)
    return teacher


@dataclass
class AdamWState:
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)
    count: int = 0


@torch.no_grad()
def adamw_update(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
                 opt: AdamWState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01) -> None:
    """In-place decoupled weight decay Adam step over named tensors."""
    if grads.keys() != params.keys():
        raise ValueError("gradient names do not match parameter names")
    bad = [k for k, g in grads.items() if not torch.isfinite(g).all()]
    if bad:
        raise NonFiniteError(f"non-finite gradient for {bad[:3]}")
    b1, b2 = betas
    opt.count += 1
    bc1 = 1 - b1 ** opt.count
    bc2 = 1 - b2 ** opt.count
    for k, p in params.items():
        g = grads[k]
        if k not in opt.exp_avg:
            opt.exp_avg[k] = torch.zeros_like(p)
            opt.exp_avg_sq[k] = torch.zeros_like(p)
        m, v = opt.exp_avg[k], opt.exp_avg_sq[k]
        p.mul_(1 - lr * weight_decay)
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        denom = (v / bc2).sqrt_().add_(eps)
        p.addcdiv_(m, denom, value=-lr / bc1)


# --------------------------------------------------------------------------
# state


@dataclass
class LossReport:
    l_sup: float
    l_unsup: float
    l_total: float
    l_head: float = 0.0
    unsup_views: tuple[float, float] = (0.0, 0.0)
    dfe_similarity: list[float] = field(default_factory=list)
    n_unlabeled: int = 0
    lr: float = 0.0
    ema_momentum: float = 0.0
    skipped: bool = False
    reason: str = ""


@dataclass
class CacheEntry:
    pairs: list[int]              # eligible frame-pair starts
    prompt_mask: np.ndarray       # S x H x W hard labels; zero where no prompt is allowed
    window: tuple[int, int] | None = None


@dataclass
class TrainState:
    student: SSSNet
    teacher: SSSNet
    opt: AdamWState
    step: int
    seed: int
    rng: np.random.Generator
    loss_history: list[dict] = field(default_factory=list)
    cache: list[CacheEntry] | None = None

    @classmethod
    def create(cls, model_cfg: BackboneConfig, seed: int, dtype=torch.float32) -> "TrainState":
        torch.manual_seed(seed)
        student = SSSNet(model_cfg).to(dtype)
        teacher = copy.deepcopy(student)
        for p in teacher.parameters():
            p.requires_grad_(False)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        return cls(student, teacher, AdamWState(), 0, seed, rng)


def adamw_step(state: TrainState, gradients: dict[str, torch.Tensor], lr: float,
               cfg: TrainConfig = TrainConfig()) -> TrainState:
    params = dict(state.student.named_parameters())
    adamw_update(params, gradients, state.opt, lr, (cfg.beta1, cfg.beta2), cfg.eps,
                 cfg.weight_decay)
    return state


# --------------------------------------------------------------------------
# inference helpers


def _as_tensor(images: np.ndarray, like: SSSNet) -> torch.Tensor:
    dtype = next(like.parameters()).dtype
    return torch.as_tensor(np.ascontiguousarray(images), dtype=dtype)[:, None]


@torch.no_grad()
def pseudo_masks_for_volume(model: SSSNet, volume: Volume3D) -> PseudoMaskVolume:
    x = _as_tensor(volume.slices, model)
    pyr = model.encode(x)
    return predict_pseudo_masks(pyr, model.pseudo_head, x.shape[-2:], model.cfg.num_classes)


def prompt_plan(pmv: PseudoMaskVolume, cfg: TrainConfig) -> CacheEntry | None:
    """Eligible frame pairs and promptable labels for one unlabeled volume.

    With PCSW the pairs and prompts are confined to the first valid window
    (``None`` if there is none); without it every predicted-foreground slice
    is used as is.
    """
    hard = pmv.hard
    if cfg.pcsw_enabled:
        win = select_valid_window(pmv, cfg.tau, per_class=cfg.per_class,
                                  strict_band=cfg.strict_band)
        if win is None:
            return None
        mask = np.zeros_like(hard)
        zs = list(win.slices)
        mask[zs] = hard[zs]
        pairs = [t for t in range(win.start, win.start + win.length - 1)]
        if not pairs:  # length-1 window: pair it with a neighbour
            pairs = [min(win.start, hard.shape[0] - 2)]
        return CacheEntry(pairs, mask, (win.start, win.length))
    pairs = target_pairs(hard) or list(range(hard.shape[0] - 1))
    return CacheEntry(pairs, hard.copy(), None)


def refresh_cache(state: TrainState, split: DatasetSplit, cfg: TrainConfig) -> None:
    model = state.teacher if cfg.pseudo_source == "teacher" else state.student
    state.cache = [prompt_plan(pseudo_masks_for_volume(model, v), cfg) for v in split.unlabeled]


@torch.no_grad()
def predict_volume(model: SSSNet, volume: Volume3D, *, pcsw_enabled: bool = True,
                   tau: float = 0.8, per_class: bool = True, strict_band: bool = False,
                   use_prompts: bool = True) -> np.ndarray:
    """Hard labels for a volume, self-prompted from the model's own pseudo-masks."""
    x = _as_tensor(volume.slices, model)
    pyr = model.encode(x)
    prompt_sets = None
    if use_prompts:
        pmv = predict_pseudo_masks(pyr, model.pseudo_head, x.shape[-2:], model.cfg.num_classes)
        if pcsw_enabled:
            win = select_valid_window(pmv, tau, per_class=per_class, strict_band=strict_band)
            zs = [] if win is None else list(win.slices)
            prompts = prompts_from_labels(pmv.hard[zs], zs)
        else:
            prompts = prompts_from_labels(pmv.hard, range(pmv.hard.shape[0]))
        prompt_sets = [prompts.for_slice(z) for z in range(x.shape[0])]
    emb = model.embed_prompts(prompt_sets, x.shape[-2:])
    logits = model.decode(pyr, emb, x.shape[-2:])
    return logits.argmax(dim=1).cpu().numpy().astype(np.uint8)


# --------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    images: np.ndarray                  # N x H x W
    labels: np.ndarray | None           # N x H x W (ground truth for labeled batches)
    prompts: list[PromptSet | None]


def _frames_prompts(labels: np.ndarray, use: bool) -> list[PromptSet | None]:
    if not use:
        return [None] * len(labels)
    return [prompts_from_labels(lab[None], [0]) for lab in labels]


def sample_labeled(split: DatasetSplit, n: int, rng: np.random.Generator,
                   cfg: TrainConfig) -> Batch:
    imgs, labs, prompts = [], [], []
    picks = rng.choice(len(split.labeled), size=n, replace=len(split.labeled) < n)
    for i in picks:
        vol, mask = split.labeled[int(i)]
        _, frames, labels = extract_frame_pair(vol, mask, rng)
        frames, geom = aug.weak_augment(frames, rng, cfg.weak)
        labels = geom.apply(labels, order=0)
        imgs.append(frames)
        labs.append(labels)
        prompts += _frames_prompts(labels, rng.random() < cfg.prompt_prob)
    return Batch(np.concatenate(imgs), np.concatenate(labs), prompts)


def sample_unlabeled(split: DatasetSplit, cache: list[CacheEntry | None], n: int,
                     rng: np.random.Generator, cfg: TrainConfig) -> Batch | None:
    eligible = [i for i, c in enumerate(cache) if c is not None]
    if n == 0 or not eligible:
        return None
    picks = rng.choice(len(eligible), size=n, replace=len(eligible) < n)
    imgs, prompts = [], []
    for j in picks:
        i = eligible[int(j)]
        entry = cache[i]
        t = entry.pairs[int(rng.integers(len(entry.pairs)))]
        frames = split.unlabeled[i].slices[t:t + 2]
        frames, geom = aug.weak_augment(frames, rng, cfg.weak)
        pmask = geom.apply(entry.prompt_mask[t:t + 2], order=0)
        imgs.append(frames)
        prompts += _frames_prompts(pmask, rng.random() < cfg.prompt_prob)
    return Batch(np.concatenate(imgs), None, prompts)


# --------------------------------------------------------------------------
# the step


def _peer_index(j: int, n: int) -> int:
    return (j + 2) % n if n > 2 else (j + 1) % n


def compute_losses(state: TrainState, lab: Batch, unl: Batch | None, cfg: TrainConfig):
    """Forward pass for one step; returns (objective, report-without-skips)."""
    student, teacher = state.student, state.teacher
    rng = state.rng
    size = lab.images.shape[-2:]

    # labeled branch
    x_l = _as_tensor(lab.images, student)
    y_l = torch.as_tensor(lab.labels, dtype=torch.long)
    pyr_l = student.encode(x_l)
    logits_l = student.decode(pyr_l, student.embed_prompts(lab.prompts, size), size)
    l_sup = supervised_loss(logits_l, y_l)
    l_head = F.cross_entropy(student.pseudo_logits(pyr_l, size), y_l)

    l_unsup = logits_l.sum() * 0.0
    views = (0.0, 0.0)
    sims: list[float] = []
    n_unl = 0
    if unl is not None:
        n = unl.images.shape[0]
        n_unl = n
        x_w = _as_tensor(unl.images, student)
        source = teacher if cfg.pseudo_source == "teacher" else student
        with torch.no_grad():
            logits_w = source(x_w, unl.prompts)
            pseudo = make_pseudo_labels(logits_w)
            pyr_w_head = student.encode(x_w)
        l_head = l_head + F.cross_entropy(student.pseudo_logits(pyr_w_head, size), pseudo)

        s1, s2, p1, p2 = [], [], [], []
        pl = pseudo.numpy()
        for j in range(n):
            peer = _peer_index(j, n)
            pair = aug.augment_pair(unl.images[j], rng, unl.images[peer], cfg.strong)
            m1, m2 = pair.mix_masks
            s1.append(pair.x_s1)
            s2.append(pair.x_s2)
            p1.append(np.where(m1, pl[j], pl[peer]))
            p2.append(np.where(m2, pl[j], pl[peer]))
        x_s1 = _as_tensor(np.stack(s1), student)
        x_s2 = _as_tensor(np.stack(s2), student)
        pl1 = torch.as_tensor(np.stack(p1), dtype=torch.long)
        pl2 = torch.as_tensor(np.stack(p2), dtype=torch.long)

        emb = student.embed_prompts(unl.prompts, size)
        f1, f2, _ = aug.complementary_dropout(student.encode(x_s1), student.encode(x_s2),
                                              cfg.dropout_p, rng)
        if student.dfe is not None:
            if cfg.dfe_pairing == "strong":
                fused, stats = student.dfe(f1, f2)
                adj1 = adj2 = fused.adjusted
            else:
                f_w = student.encode(x_w)
                fused1, stats = student.dfe(f_w, f1)
                fused2, _ = student.dfe(f_w, f2)
                adj1, adj2 = fused1.adjusted, fused2.adjusted
            sims = [float(s.similarity.detach().mean()) for s in stats]
            out1 = student.decode(f1, emb, size, adjusted=adj1)
            out2 = student.decode(f2, emb, size, adjusted=adj2)
        else:
            out1 = student.decode(f1, emb, size)
            out2 = student.decode(f2, emb, size)
        l_unsup = unsupervised_loss((pl1, pl2), out1, out2)
        views = (float(F.cross_entropy(out1.detach(), pl1)), float(F.cross_entropy(out2.detach(), pl2)))

    l_total = l_sup + l_unsup
    report = LossReport(l_sup.item(), l_unsup.item(), l_sup.item() + l_unsup.item(),
                        l_head.item(), views, sims, n_unl)
    return l_total, l_head, report


def train_step(state: TrainState, labeled_batch: Batch, unlabeled_batch: Batch | None,
               cfg: TrainConfig) -> tuple[TrainState, LossReport]:
    """One optimisation step; non-finite losses or gradients leave the parameters untouched."""
    t = state.step
    l_total, l_head, report = compute_losses(state, labeled_batch, unlabeled_batch, cfg)
    lr = lr_schedule(t, cfg.steps, cfg.warmup_steps, cfg.peak_lr)
    mom = ema_momentum(t, cfg.ema_max)
    if not (math.isfinite(report.l_total) and math.isfinite(report.l_head)):
        report.skipped, report.reason = True, "non-finite loss"
    else:
        params = dict(state.student.named_parameters())
        names = list(params)
        grads = torch.autograd.grad(l_total + l_head, [params[k] for k in names],
                                    allow_unused=True)
        grads = {k: torch.zeros_like(params[k]) if g is None else g for k, g in zip(names, grads)}
        try:
            adamw_step(state, grads, lr, cfg)
        except NonFiniteError as exc:
            report.skipped, report.reason = True, str(exc)
        else:
            ema_update(state.teacher, state.student, mom)
    state.step = t + 1
    state.loss_history.append({"step": t, "l_total": report.l_total})
    report.lr, report.ema_momentum = lr, mom
    return state, report


def run_step(state: TrainState, split: DatasetSplit, cfg: TrainConfig):
    """Sample batches (refreshing the PCSW cache when due) and take one step."""
    use_unl = cfg.unlabeled_batch > 0 and state.step >= cfg.unsup_start
    if use_unl and (state.cache is None
                    or (state.step - cfg.unsup_start) % cfg.refresh_every == 0):
        refresh_cache(state, split, cfg)
    lab = sample_labeled(split, cfg.labeled_batch, state.rng, cfg)
    unl = None
    if use_unl:
        unl = sample_unlabeled(split, state.cache, cfg.unlabeled_batch, state.rng, cfg)
    return train_step(state, lab, unl, cfg)
