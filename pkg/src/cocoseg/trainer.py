"""Joint optimization of the two branches with cross pseudo supervision and
the multi-scale contrastive loss.

Each step consumes a half-labeled, half-unlabeled batch.  Both branches see
the whole batch; labeled slices contribute a supervised loss per branch,
unlabeled slices a Dice consistency loss against the *other* branch's
detached argmax.  One shared contrastive loss over the projected multi-scale
features enters both branch objectives; it is backpropagated once, which
gives every parameter exactly the gradient of its own branch's objective
(cross terms vanish because pseudo labels are detached integers).

The attention branch exists only to teach: inference is conv-branch argmax.

Runs are deterministic for a fixed seed and thread count: model init draws
from the seeded torch generator, and data order, augmentation, and patch
partitioning each use their own numpy stream spawned from the seed.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses, sampling, schedule, tensorio
from .metrics import EvalReport, evaluate_cases
from .models import (
    BRANCH_ATTN,
    BRANCH_CNN,
    DualModel,
    ModelConfig,
    config_from_dict,
    config_to_dict,
    save_checkpoint,
)
from .tensorio import DatasetManifest


class NonFiniteLossError(RuntimeError):
    """A loss term left the reals; the offending batch was dumped to disk."""


@dataclass
class TrainConfig:
    """Every knob of one training run, JSON-serializable."""

    manifest: str = ""
    seed: int = 0
    iterations: int = 3000
    batch_size: int = 8
    val_every: int = 200
    lr_cnn: float = 5e-4
    lr_attn: float = 1e-4
    poly_power: float = 0.9
    weight_decay: float = 5e-4
    tau: float = 0.1
    w_cl: float = 1e-3
    w_cps_scale: float = 1.0
    dice_only_sup: bool = False
    patch_sizes: tuple[int, ...] = (4, 4, 4)
    cl_scales: tuple[tuple[int, int], ...] | None = None
    random_patch_offset: bool = False
    enable_cl: bool = True
    enable_cross_labels: bool = True
    enable_balancing: bool = True
    labeled_only: bool = False
    anchor_background: bool = True
    aug_flip: bool = True
    aug_rot90: bool = True
    aug_crop: bool = False
    aug_crop_pad: int = 4
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self) -> None:
        if self.batch_size % 2:
            raise ValueError("batch_size must be even (half labeled, half unlabeled)")
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if len(self.patch_sizes) != len(self.model.tap_scales):
            raise ValueError("need one patch size per tap scale")

    def active_cl_scales(self) -> list[tuple[int, int]]:
        taps = [tuple(s) for s in self.model.tap_scales]
        if self.cl_scales is None:
            return taps
        chosen = [tuple(s) for s in self.cl_scales]
        unknown = [s for s in chosen if s not in taps]
        if unknown:
            raise ValueError(f"cl_scales {unknown} are not tap scales")
        return chosen

    def to_dict(self) -> dict:
        raw = dataclasses.asdict(self)
        raw["model"] = config_to_dict(self.model)
        raw["patch_sizes"] = list(self.patch_sizes)
        raw["cl_scales"] = None if self.cl_scales is None else [list(s) for s in self.cl_scales]
        return raw

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        if "model" in raw:
            raw["model"] = config_from_dict(raw["model"])
        if "patch_sizes" in raw:
            raw["patch_sizes"] = tuple(raw["patch_sizes"])
        if raw.get("cl_scales") is not None:
            raw["cl_scales"] = tuple(tuple(s) for s in raw["cl_scales"])
        return cls(**raw)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class RunRecord:
    """Scalar log of one run: per-iteration terms, validations, best pointer."""

    iters: list[dict] = field(default_factory=list)
    validations: list[dict] = field(default_factory=list)
    best: dict | None = None

    def save_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.iters:
                fh.write(json.dumps({"type": "iter", **rec}) + "\n")
            for rec in self.validations:
                fh.write(json.dumps({"type": "val", **rec}) + "\n")
            if self.best is not None:
                fh.write(json.dumps({"type": "best", **self.best}) + "\n")

    @classmethod
    def load_jsonl(cls, path: str | Path) -> "RunRecord":
        record = cls()
        for line in Path(path).read_text().splitlines():
            rec = json.loads(line)
            kind = rec.pop("type")
            if kind == "iter":
                record.iters.append(rec)
            elif kind == "val":
                record.validations.append(rec)
            elif kind == "best":
                record.best = rec
        return record


@dataclass
class Batch:
    images: torch.Tensor  # (B, 1, H, W) float32
    gt_labels: torch.Tensor  # (B, H, W) long; zero-filled on unlabeled rows
    is_labeled: torch.Tensor  # (B,) bool


@dataclass
class SlicePool:
    images: np.ndarray
    labels: np.ndarray | None
    case_of: list[str]

    def __len__(self) -> int:
        return self.images.shape[0]


def load_pool(manifest: DatasetManifest, split: str, with_labels: bool) -> SlicePool:
    images, labels, case_of = [], [], []
    for case in manifest.cases_in(split):
        for rec in case.slices:
            images.append(tensorio.read_tensor(manifest.resolve(rec.image)))
            if with_labels:
                labels.append(tensorio.read_tensor(manifest.resolve(rec.label)))
            case_of.append(case.case_id)
    return SlicePool(
        images=np.stack(images).astype(np.float32),
        labels=np.stack(labels) if with_labels else None,
        case_of=case_of,
    )


class EpochSampler:
    """Yields index chunks, reshuffling its pool whenever it runs out."""

    def __init__(self, n: int, rng: np.random.Generator):
        if n == 0:
            raise ValueError("empty pool")
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while len(out) < k:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            out.append(self.order[self.pos])
            self.pos += 1
        return np.asarray(out)


def _augment(img: np.ndarray, lab: np.ndarray | None, rng: np.random.Generator, config: TrainConfig):
    if config.aug_flip:
        if rng.random() < 0.5:
            img = img[::-1]
            lab = lab[::-1] if lab is not None else None
        if rng.random() < 0.5:
            img = img[:, ::-1]
            lab = lab[:, ::-1] if lab is not None else None
    if config.aug_rot90:
        k = int(rng.integers(0, 4))
        img = np.rot90(img, k)
        lab = np.rot90(lab, k) if lab is not None else None
    if config.aug_crop:
        # Random crop back to the native size after padding: a translation
        # jitter, the desk-scale stand-in for patch cropping.
        p = config.aug_crop_pad
        h, w = img.shape
        r0 = int(rng.integers(0, 2 * p + 1))
        c0 = int(rng.integers(0, 2 * p + 1))
        img = np.pad(img, p, mode="reflect")[r0 : r0 + h, c0 : c0 + w]
        if lab is not None:
            lab = np.pad(lab, p, mode="constant")[r0 : r0 + h, c0 : c0 + w]
    return np.ascontiguousarray(img), (None if lab is None else np.ascontiguousarray(lab))


def assemble_batch(
    labeled: SlicePool,
    unlabeled: SlicePool | None,
    samplers: dict,
    rng: np.random.Generator,
    config: TrainConfig,
) -> Batch:
    b = config.batch_size
    n_lab = b if config.labeled_only else b // 2
    images, gts, flags = [], [], []
    for idx in samplers["labeled"].take(n_lab):
        img, lab = _augment(labeled.images[idx], labeled.labels[idx], rng, config)
        images.append(img)
        gts.append(lab)
        flags.append(True)
    if not config.labeled_only:
        assert unlabeled is not None
        for idx in samplers["unlabeled"].take(b - n_lab):
            img, _ = _augment(unlabeled.images[idx], None, rng, config)
            images.append(img)
            gts.append(np.zeros_like(images[-1], dtype=np.int64))
            flags.append(False)
    return Batch(
        images=torch.from_numpy(np.stack(images)).unsqueeze(1).float(),
        gt_labels=torch.from_numpy(np.stack(gts).astype(np.int64)),
        is_labeled=torch.tensor(flags, dtype=torch.bool),
    )


def build_optimizers(model: DualModel, config: TrainConfig):
    """AdamW per branch; the shared projector layers step with the conv
    branch's optimizer (their gradient already carries both branches'
    contributions from the single contrastive backward)."""
    cnn_params = list(model.cnn.parameters())
    attn_params = list(model.attn.parameters())
    for proj in model.projectors.values():
        cnn_params += list(proj.cnn_head.parameters())
        cnn_params += list(proj.shared.parameters())
        attn_params += list(proj.attn_head.parameters())
    opt_cnn = torch.optim.AdamW(cnn_params, lr=config.lr_cnn, weight_decay=config.weight_decay)
    opt_attn = torch.optim.AdamW(attn_params, lr=config.lr_attn, weight_decay=config.weight_decay)
    return opt_cnn, opt_attn


def contrastive_loss_for_batch(
    model: DualModel,
    feats_cnn: dict,
    feats_attn: dict,
    labels_for_cnn: torch.Tensor,
    labels_for_attn: torch.Tensor,
    config: TrainConfig,
    patch_rng: np.random.Generator,
) -> torch.Tensor:
    """Project both branches at every active scale and reduce the group losses."""
    taps = [tuple(s) for s in config.model.tap_scales]
    active = config.active_cl_scales()
    stacks = []
    for scale, patch in zip(taps, config.patch_sizes):
        if scale not in active:
            continue
        emb_cnn = model.project(feats_cnn[scale], scale, BRANCH_CNN)
        emb_attn = model.project(feats_attn[scale], scale, BRANCH_ATTN)
        n = emb_cnn.shape[0]
        emb = torch.cat([emb_cnn, emb_attn], dim=0)  # (2N, d, h, w)
        lab = torch.cat(
            [
                sampling.downsample_labels(labels_for_cnn, scale),
                sampling.downsample_labels(labels_for_attn, scale),
            ],
            dim=0,
        )
        groups = sampling.partition_patches(
            2 * n, scale, patch, patch_rng, random_offset=config.random_patch_offset
        )
        stacks.append(
            sampling.stack_groups(groups, emb, lab, anchor_background=config.anchor_background)
        )
    return losses.multiscale_contrastive_loss_stacked(
        stacks, config.tau, balanced=config.enable_balancing
    )


def train_step(
    model: DualModel,
    opt_cnn: torch.optim.Optimizer,
    opt_attn: torch.optim.Optimizer,
    batch: Batch,
    t: int,
    config: TrainConfig,
    patch_rng: np.random.Generator,
    dump_dir: str | Path | None = None,
) -> dict:
    """One optimization step; returns the scalar log entry for iteration t."""
    zero = torch.zeros(())
    try:
        logits_cnn, feats_cnn = model.forward_cnn(batch.images)
        logits_attn, feats_attn = model.forward_attn(batch.images)
        probs_cnn = torch.softmax(logits_cnn, dim=1)
        probs_attn = torch.softmax(logits_attn, dim=1)

        lab = batch.is_labeled
        unl = ~lab
        l_sup_cnn = (
            losses.supervised_loss(logits_cnn[lab], batch.gt_labels[lab], config.dice_only_sup)
            if lab.any()
            else zero
        )
        l_sup_attn = (
            losses.supervised_loss(logits_attn[lab], batch.gt_labels[lab], config.dice_only_sup)
            if lab.any()
            else zero
        )

        w_cps = schedule.cps_weight(t, config.iterations) * config.w_cps_scale
        if unl.any():
            pseudo_cnn = probs_cnn.detach().argmax(dim=1)
            pseudo_attn = probs_attn.detach().argmax(dim=1)
            l_cps_cnn = losses.cps_loss(probs_cnn[unl], pseudo_attn[unl])
            l_cps_attn = losses.cps_loss(probs_attn[unl], pseudo_cnn[unl])
        else:
            pseudo_cnn = batch.gt_labels
            pseudo_attn = batch.gt_labels
            l_cps_cnn = zero
            l_cps_attn = zero

        if config.enable_cl:
            if config.enable_cross_labels:
                map_cnn, map_attn = sampling.fuse_labels(
                    lab, batch.gt_labels, pseudo_cnn, pseudo_attn
                )
                labels_for_cnn, labels_for_attn = map_cnn.labels, map_attn.labels
            else:
                # Ablation: each branch trusts its own prediction on unlabeled slices.
                sel = lab.view(-1, 1, 1)
                labels_for_cnn = torch.where(sel, batch.gt_labels, pseudo_cnn).long()
                labels_for_attn = torch.where(sel, batch.gt_labels, pseudo_attn).long()
            l_cl = contrastive_loss_for_batch(
                model, feats_cnn, feats_attn, labels_for_cnn, labels_for_attn, config, patch_rng
            )
        else:
            l_cl = zero
    except losses.NonFiniteProbabilityError as exc:
        if dump_dir is not None:
            _dump_batch(batch, t, dump_dir)
        raise NonFiniteLossError(f"NaN during loss computation at iteration {t}") from exc

    loss_cnn = l_sup_cnn + w_cps * l_cps_cnn + config.w_cl * l_cl
    loss_attn = l_sup_attn + w_cps * l_cps_attn + config.w_cl * l_cl
    # One backward with the shared term counted once: every parameter gets
    # exactly the gradient of its own branch objective.
    total = l_sup_cnn + w_cps * l_cps_cnn + l_sup_attn + w_cps * l_cps_attn + config.w_cl * l_cl

    if not torch.isfinite(total):
        if dump_dir is not None:
            _dump_batch(batch, t, dump_dir)
        raise NonFiniteLossError(f"non-finite loss at iteration {t}: {float(total)}")

    lr_cnn = schedule.poly_lr(t, config.iterations, config.lr_cnn, config.poly_power)
    lr_attn = schedule.poly_lr(t, config.iterations, config.lr_attn, config.poly_power)
    for group in opt_cnn.param_groups:
        group["lr"] = lr_cnn
    for group in opt_attn.param_groups:
        group["lr"] = lr_attn

    opt_cnn.zero_grad(set_to_none=True)
    opt_attn.zero_grad(set_to_none=True)
    total.backward()
    opt_cnn.step()
    opt_attn.step()

    def _scalar(x: torch.Tensor) -> float:
        return float(x.detach())

    return {
        "t": t,
        "loss_cnn": _scalar(loss_cnn),
        "loss_attn": _scalar(loss_attn),
        "l_sup_cnn": _scalar(l_sup_cnn),
        "l_sup_attn": _scalar(l_sup_attn),
        "l_cps_cnn": _scalar(l_cps_cnn),
        "l_cps_attn": _scalar(l_cps_attn),
        "l_cl": _scalar(l_cl),
        "w_cps": w_cps,
        "w_cl": config.w_cl,
        "lr_cnn": lr_cnn,
        "lr_attn": lr_attn,
    }


def _dump_batch(batch: Batch, t: int, dump_dir: str | Path) -> None:
    dump_dir = Path(dump_dir) / f"diagnostic_t{t}"
    dump_dir.mkdir(parents=True, exist_ok=True)
    tensorio.write_tensor(dump_dir / "images.mct", batch.images.numpy())
    tensorio.write_tensor(dump_dir / "gt_labels.mct", batch.gt_labels.numpy().astype(np.int64))
    tensorio.write_tensor(
        dump_dir / "is_labeled.mct", batch.is_labeled.numpy().astype(np.uint8)
    )


@torch.no_grad()
def infer(model: DualModel, images: torch.Tensor) -> torch.Tensor:
    """Segmentation = conv-branch argmax; the attention branch plays no part."""
    logits, _ = model.forward_cnn(images)
    return torch.softmax(logits, dim=1).argmax(dim=1)


def evaluate_split(model: DualModel, manifest: DatasetManifest, split: str) -> EvalReport:
    preds, gts, ids = [], [], []
    for case in manifest.cases_in(split):
        images = np.stack(
            [tensorio.read_tensor(manifest.resolve(r.image)) for r in case.slices]
        ).astype(np.float32)
        labels = np.stack(
            [tensorio.read_tensor(manifest.resolve(r.label)) for r in case.slices]
        )
        pred = infer(model, torch.from_numpy(images).unsqueeze(1)).numpy()
        preds.append(pred)
        gts.append(labels)
        ids.append(case.case_id)
    return evaluate_cases(preds, gts, manifest.num_classes, case_ids=ids)


def run_training(
    manifest: DatasetManifest, config: TrainConfig, out_dir: str | Path
) -> RunRecord:
    """Full training loop with periodic validation and checkpointing.

    Keeps the checkpoint with the highest conv-branch mean validation Dice
    under ``out_dir/best_ckpt`` and the last state under
    ``out_dir/final_ckpt``; scalar logs go to ``out_dir/run_record.jsonl``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.save(out_dir / "train_config.json")

    labeled = load_pool(manifest, "labeled_train", with_labels=True)
    unlabeled = None
    if not config.labeled_only:
        unlabeled = load_pool(manifest, "unlabeled_train", with_labels=False)
        if len(unlabeled) == 0:
            raise ValueError("unlabeled_train split is empty")
    if len(labeled) == 0 or not manifest.cases_in("val"):
        raise ValueError("labeled_train and val splits must be non-empty")

    seq = np.random.SeedSequence(config.seed)
    data_seed, aug_seed, patch_seed = seq.spawn(3)
    data_rng = np.random.default_rng(data_seed)
    aug_rng = np.random.default_rng(aug_seed)
    patch_rng = np.random.default_rng(patch_seed)

    torch.manual_seed(config.seed)
    model = DualModel(config.model)
    opt_cnn, opt_attn = build_optimizers(model, config)

    samplers = {"labeled": EpochSampler(len(labeled), data_rng)}
    if unlabeled is not None:
        samplers["unlabeled"] = EpochSampler(len(unlabeled), data_rng)

    record = RunRecord()
    best_dsc = -1.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", losses.ContrastiveLossWarning)
        for t in range(config.iterations):
            batch = assemble_batch(labeled, unlabeled, samplers, aug_rng, config)
            logs = train_step(
                model, opt_cnn, opt_attn, batch, t, config, patch_rng, dump_dir=out_dir
            )
            record.iters.append(logs)

            last = t == config.iterations - 1
            if (t + 1) % config.val_every == 0 or last:
                report = evaluate_split(model, manifest, "val")
                entry = {
                    "t": t,
                    "mean_dsc": report.mean_dsc,
                    "mean_hd95": report.mean_hd95,
                    "class_dsc": report.class_dsc,
                    "class_hd95": report.class_hd95,
                }
                record.validations.append(entry)
                if report.mean_dsc > best_dsc:
                    best_dsc = report.mean_dsc
                    save_checkpoint(model, out_dir / "best_ckpt")
                    record.best = {"t": t, "mean_dsc": best_dsc, "path": str(out_dir / "best_ckpt")}

    save_checkpoint(model, out_dir / "final_ckpt")
    record.save_jsonl(out_dir / "run_record.jsonl")
    return record


def export_slice_embeddings(
    model: DualModel, image: np.ndarray, gt_label: np.ndarray, scale: tuple[int, int]
) -> tuple[np.ndarray, np.ndarray]:
    """Projected conv-branch pixel embeddings of one slice at one scale.

    Returns (embeddings (h*w, d), labels (h*w,)) where labels are the ground
    truth subsampled to the scale, for external 2-D projection tools.
    """
    with torch.no_grad():
        _, feats = model.forward_cnn(torch.from_numpy(image).float().reshape(1, 1, *image.shape))
        emb = model.project(feats[tuple(scale)], tuple(scale), BRANCH_CNN)[0]
    labels = sampling.downsample_labels(torch.from_numpy(np.asarray(gt_label)).long(), tuple(scale))
    d = emb.shape[0]
    return emb.reshape(d, -1).T.numpy(), labels.reshape(-1).numpy()
