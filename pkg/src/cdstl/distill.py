"""Synthetic-set distillation by gradient, distribution and trajectory matching.

All three engines read real data only through a :class:`CoreSet`, so the
prune step is the single place where the training data is chosen.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator

from cdstl._validation import check_images_labels, check_positive
from cdstl.data import DistilledContainer, LabeledDataset, dataset_hash
from cdstl.errors import ArtifactIOError, ConfigError, DataError, DegenerateError, NumericError
from cdstl.nncore import (
    Arch,
    Model,
    Rng,
    as_tensor,
    build_model,
    cross_entropy,
    derive_seed,
    embed,
    flatten_params,
    forward,
    load_model,
    save_model,
    train_sgd,
    unflatten_params,
)
from cdstl.pruning import CoreSet

log = logging.getLogger(__name__)

METHODS = ("DC", "DM", "MTT")

# Synthetic-image learning rates that work at desk scale; not taken from anywhere.
DEFAULT_SYN_LR = {"DC": 10.0, "DM": 0.1, "MTT": 1.0}


@dataclass(frozen=True)
class DistillConfig:
    method: str = "DM"
    iterations: int = 200
    syn_lr: float | None = None  # None -> DEFAULT_SYN_LR[method]
    inner_steps: int = 4  # student SGD steps per trajectory segment
    expert_steps: int = 2  # target horizon, in snapshots
    models_per_iteration: int = 1
    batch_per_class: int = 32
    seed: int = 0
    init: str = "real"
    dc_granularity: str = "global"
    student_lr: float = 0.01
    expert_total_steps: int = 60
    expert_interval: int = 10
    expert_lr: float = 0.01
    expert_batch: int = 32
    num_experts: int = 2
    backbone: str = "ConvNetS"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        for name in (
            "inner_steps",
            "expert_steps",
            "models_per_iteration",
            "batch_per_class",
            "expert_interval",
            "expert_batch",
            "num_experts",
        ):
            check_positive(name, getattr(self, name), integer=True)
        check_positive("iterations", self.iterations, integer=True, allow_zero=True)
        check_positive("student_lr", self.student_lr)
        check_positive("expert_lr", self.expert_lr, allow_zero=True)
        if self.syn_lr is not None:
            check_positive("syn_lr", self.syn_lr)
        if self.init not in ("real", "noise"):
            raise ConfigError(f"init must be 'real' or 'noise', got {self.init!r}")
        if self.dc_granularity not in ("global", "per-layer"):
            raise ConfigError(f"dc_granularity must be 'global' or 'per-layer', got {self.dc_granularity!r}")
        if self.expert_total_steps < 2 * self.expert_interval:
            raise ConfigError("expert_total_steps must be at least twice expert_interval")
        Arch.parse(self.backbone)

    @property
    def lr(self) -> float:
        return self.syn_lr if self.syn_lr is not None else DEFAULT_SYN_LR[self.method]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(eq=False)
class SyntheticSet:
    images: torch.Tensor  # [M, C, H, W], requires grad
    labels: np.ndarray
    ipc: int
    num_classes: int
    lr: float = 1.0
    step: int = 0
    source_indices: np.ndarray | None = None

    def class_slice(self, c: int) -> torch.Tensor:
        return self.images[c * self.ipc : (c + 1) * self.ipc]

    @torch.no_grad()
    def update(self, grad: torch.Tensor, clamp: bool = True) -> None:
        self.images.sub_(self.lr * grad)
        if clamp:
            self.images.clamp_(0.0, 1.0)
        self.step += 1


def synthetic_labels(num_classes: int, ipc: int) -> np.ndarray:
    return np.repeat(np.arange(num_classes, dtype=np.int64), ipc)


def init_synthetic(
    core: CoreSet, ds: LabeledDataset, ipc: int, strategy: str = "real", seed: int = 0, lr: float = 1.0
) -> SyntheticSet:
    """``ipc`` images per class, drawn from the core-set (``real``) or uniform noise."""
    check_positive("ipc", ipc, integer=True)
    k = ds.num_classes
    rng = Rng(derive_seed(seed, "init_synthetic"))
    labels = synthetic_labels(k, ipc)
    if strategy == "noise":
        images = rng.uniform((k * ipc, *ds.image_shape))
        source = None
    elif strategy == "real":
        picks = []
        for c in range(k):
            members = core.class_members(ds, c)
            if members.size < ipc:
                raise DataError(
                    f"class {c} has {members.size} core-set members but ipc={ipc}; "
                    "use the 'noise' init strategy or a larger r"
                )
            picks.append(np.sort(members[rng.spawn("class", c).choice(members.size, ipc)]))
        source = np.concatenate(picks)
        images = ds.images[source].copy()
    else:
        raise ConfigError(f"unknown init strategy {strategy!r}")
    x = torch.tensor(images, dtype=torch.float64, requires_grad=True)
    return SyntheticSet(x, labels, ipc, k, lr, 0, source)


# --------------------------------------------------------------------------
# losses


def _param_grads(model: Model, params, images, labels, create_graph: bool):
    loss = cross_entropy(forward(model, images, params), labels)
    return torch.autograd.grad(loss, list(params.values()), create_graph=create_graph)


def cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na, nb = a.norm(), b.norm()
    if na.item() < 1e-12 or nb.item() < 1e-12:
        raise DegenerateError(f"gradient norm below 1e-12 (syn {na.item():.3g}, real {nb.item():.3g})")
    return 1.0 - (a @ b) / (na * nb)


def dc_loss(syn_images, syn_labels, real_images, real_labels, model: Model, granularity: str = "global"):
    """One minus the cosine between parameter gradients on synthetic and real batches.

    ``global`` takes a single cosine over the concatenated gradient;
    ``per-layer`` sums one cosine distance per parameter tensor.
    Differentiable with respect to ``syn_images``.
    """
    syn_images = as_tensor(syn_images)
    if syn_images.shape[0] == 0 or len(real_labels) == 0:
        raise DataError("dc_loss needs non-empty synthetic and real batches")
    params = {k: v.detach().requires_grad_(True) for k, v in model.params.items()}
    g_real = [g.detach() for g in _param_grads(model, params, as_tensor(real_images), real_labels, False)]
    g_syn = _param_grads(model, params, syn_images, syn_labels, True)
    if granularity == "global":
        return cosine_distance(torch.cat([g.reshape(-1) for g in g_syn]), torch.cat([g.reshape(-1) for g in g_real]))
    if granularity == "per-layer":
        return sum(cosine_distance(s.reshape(-1), r.reshape(-1)) for s, r in zip(g_syn, g_real))
    raise ConfigError(f"unknown dc granularity {granularity!r}")


def dm_loss(syn_images, syn_labels, real_batches: dict, embedder: Model) -> torch.Tensor:
    """Sum over classes of the squared distance between mean real and mean synthetic embeddings."""
    syn_images = as_tensor(syn_images)
    syn_labels = np.asarray(syn_labels)
    syn_classes = set(np.unique(syn_labels).tolist())
    real_classes = {c for c, b in real_batches.items() if len(b)}
    if syn_classes != real_classes:
        raise DataError(
            f"dm_loss: classes differ between synthetic {sorted(syn_classes)} and real {sorted(real_classes)}"
        )
    total = syn_images.new_zeros(())
    for c in sorted(syn_classes):
        with torch.no_grad():
            mu_real = embed(embedder, real_batches[c]).mean(dim=0)
        mask = torch.as_tensor(syn_labels == c)
        mu_syn = embed(embedder, syn_images[mask]).mean(dim=0)
        total = total + ((mu_real - mu_syn) ** 2).sum()
    return total


@dataclass(eq=False)
class ExpertTrajectory:
    arch: Arch
    snapshots: list[torch.Tensor]
    interval: int
    config_hash: str = ""
    degenerate: bool = False
    template: Model | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.snapshots) < 3:
            raise DataError(f"expert trajectory needs at least 3 snapshots, has {len(self.snapshots)}")
        if len({s.numel() for s in self.snapshots}) != 1:
            raise DataError("expert snapshots differ in length")


def mtt_loss(student_final: torch.Tensor, expert: ExpertTrajectory, t: int, m_exp: int) -> torch.Tensor:
    """Squared distance to the expert target, normalised by the expert's own displacement."""
    if t < 0 or t + m_exp >= len(expert.snapshots) or m_exp < 1:
        raise ConfigError(f"segment [{t}, {t + m_exp}] outside {len(expert.snapshots)} snapshots")
    start, target = expert.snapshots[t], expert.snapshots[t + m_exp]
    denom = ((start - target) ** 2).sum()
    if float(denom) < 1e-20:
        raise DegenerateError(f"expert snapshots {t} and {t + m_exp} coincide")
    return ((student_final - target) ** 2).sum() / denom


def record_expert(
    core: CoreSet,
    ds: LabeledDataset,
    arch="ConvNetS",
    total_steps: int = 60,
    interval: int = 10,
    lr: float = 0.01,
    seed: int = 0,
    batch_size: int = 32,
) -> ExpertTrajectory:
    """Train a fresh model on the core-set, flattening its parameters every ``interval`` steps."""
    if total_steps < 2 * interval:
        raise ConfigError("total_steps must be at least twice the snapshot interval")
    arch = Arch.parse(arch)
    view = core.view(ds)
    model = build_model(arch, ds.image_shape, ds.num_classes, derive_seed(seed, "expert_init"))
    snaps = []

    def snapshot(step, m):
        if step % interval == 0:
            snaps.append(flatten_params(m).detach().clone())

    train_sgd(
        model,
        view.images,
        view.labels,
        steps=total_steps,
        lr=lr,
        batch_size=batch_size,
        rng=Rng(derive_seed(seed, "expert_batches")),
        on_step=snapshot,
    )
    degenerate = all(torch.equal(snaps[0], s) for s in snaps[1:])
    if degenerate:
        log.warning("expert trajectory is degenerate: all snapshots identical")
    blob = json.dumps(
        {"arch": arch.label, "steps": total_steps, "interval": interval, "lr": lr, "seed": seed, "batch": batch_size},
        sort_keys=True,
    )
    template = build_model(arch, ds.image_shape, ds.num_classes, zero=True)
    return ExpertTrajectory(
        arch, snaps, interval, hashlib.sha256(blob.encode()).hexdigest()[:16], degenerate, template
    )


def unroll_student(
    template: Model, start: torch.Tensor, images: torch.Tensor, labels, steps: int, lr: float
) -> torch.Tensor:
    """``steps`` SGD steps from ``start`` on (images, labels), keeping the graph to ``images``."""
    flat = start.detach().clone().requires_grad_(True)
    for _ in range(steps):
        params = unflatten_params(template, flat)
        loss = cross_entropy(forward(template, images, params), labels)
        (g,) = torch.autograd.grad(loss, flat, create_graph=True)
        flat = flat - lr * g
    return flat


def save_trajectory(expert: ExpertTrajectory, directory, name: str = "expert") -> Path:
    """One NNC1 checkpoint per snapshot plus a text manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"trajectory v1 arch={expert.arch.label} interval={expert.interval} config={expert.config_hash}"]
    for i, snap in enumerate(expert.snapshots):
        m = expert.template.clone()
        for k, v in unflatten_params(m, snap).items():
            m.params[k] = v.clone()
        fname = f"{name}_{i:03d}.nnc"
        digest = save_model(m, directory / fname)
        lines.append(f"{fname} {digest}")
    manifest = directory / f"{name}.manifest"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def load_trajectory(manifest) -> ExpertTrajectory:
    manifest = Path(manifest)
    try:
        head, *rows = manifest.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {manifest}: {exc}") from exc
    meta = dict(tok.split("=", 1) for tok in head.split()[2:])
    models = [load_model(manifest.parent / row.split()[0]) for row in rows if row.strip()]
    template = models[0].clone()
    return ExpertTrajectory(
        Arch.parse(meta["arch"]),
        [flatten_params(m).detach() for m in models],
        int(meta["interval"]),
        meta.get("config", ""),
        template=template,
    )


# --------------------------------------------------------------------------
# the outer loop


def _real_batch(core: CoreSet, ds: LabeledDataset, c: int, n: int, rng: Rng) -> np.ndarray:
    members = core.class_members(ds, c)
    if members.size == 0:
        raise DataError(f"core-set has no members of class {c}")
    if members.size <= n:
        return members
    return members[np.sort(rng.choice(members.size, n))]


def _method_loss(method, images, labels, core, ds, cfg, rng, it, experts, backbone, in_shape):
    k = ds.num_classes
    if method == "DM":
        total = 0.0
        for j in range(cfg.models_per_iteration):
            net = build_model(backbone, in_shape, k, rng.spawn("net", j).seed)
            net.requires_grad_(False)
            real = {c: as_tensor(ds.images[_real_batch(core, ds, c, cfg.batch_per_class, rng)]) for c in range(k)}
            total = total + dm_loss(images, labels, real, net)
        return total / cfg.models_per_iteration
    if method == "DC":
        c = it % k
        mask = torch.as_tensor(labels == c)
        total = 0.0
        for j in range(cfg.models_per_iteration):
            net = build_model(backbone, in_shape, k, rng.spawn("net", j).seed)
            idx = _real_batch(core, ds, c, cfg.batch_per_class, rng)
            total = total + dc_loss(images[mask], labels[labels == c], ds.images[idx], ds.labels[idx], net, cfg.dc_granularity)
        return total / cfg.models_per_iteration
    if method == "MTT":
        expert = experts[rng.integers(0, len(experts))]
        t = rng.integers(0, len(expert.snapshots) - cfg.expert_steps)
        student = unroll_student(expert.template, expert.snapshots[t], images, labels, cfg.inner_steps, cfg.student_lr)
        return mtt_loss(student, expert, t, cfg.expert_steps)
    raise ConfigError(f"unknown method {method!r}")


def record_experts(core: CoreSet, ds: LabeledDataset, cfg: DistillConfig) -> list[ExpertTrajectory]:
    return [
        record_expert(
            core,
            ds,
            cfg.backbone,
            cfg.expert_total_steps,
            cfg.expert_interval,
            cfg.expert_lr,
            derive_seed(cfg.seed, "expert", e),
            cfg.expert_batch,
        )
        for e in range(cfg.num_experts)
    ]


def optimize(learnable: torch.Tensor, render, labels, core, ds, cfg: DistillConfig, *, lr, clamp, experts=None):
    """Shared outer loop: render -> method loss -> backprop -> SGD on ``learnable``.

    Returns the (iteration, loss, wall_ms) history.
    """
    in_shape = ds.image_shape
    backbone = Arch.parse(cfg.backbone)
    if cfg.method == "MTT" and experts is None:
        experts = record_experts(core, ds, cfg)
    history = []
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        rng = Rng(derive_seed(cfg.seed, "iteration", it))
        images = render(learnable)
        loss = _method_loss(cfg.method, images, labels, core, ds, cfg, rng, it, experts, backbone, in_shape)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"non-finite {cfg.method} loss at iteration {it}; config: {cfg.to_dict()}")
        (grad,) = torch.autograd.grad(loss, learnable)
        with torch.no_grad():
            learnable.sub_(lr * grad)
            if clamp:
                learnable.clamp_(0.0, 1.0)
        history.append((it, value, (time.perf_counter() - t0) * 1000.0))
        if it % 50 == 0:
            log.info("%s iteration %d loss %.6g", cfg.method, it, value)
    return history


def provenance_for(core: CoreSet, ds: LabeledDataset, cfg: DistillConfig, **extra) -> dict:
    prov = {
        "method": cfg.method,
        "r": core.r,
        "mode": core.mode,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "coreset_size": len(core),
        "dataset_id": core.dataset_id or dataset_hash(ds),
        "scorer_id": core.scorer_id,
    }
    if cfg.method == "MTT":
        prov["expert_source"] = "coreset"
    prov.update(extra)
    return prov


def distill_run(core: CoreSet, ds: LabeledDataset, cfg: DistillConfig, ipc: int = 1, experts=None) -> DistilledContainer:
    """Distill the core-set view of ``ds`` into ``ipc`` pixel images per class."""
    syn = init_synthetic(core, ds, ipc, cfg.init, cfg.seed, cfg.lr)
    history = optimize(syn.images, lambda x: x, syn.labels, core, ds, cfg, lr=cfg.lr, clamp=True, experts=experts)
    syn.step = cfg.iterations
    container = DistilledContainer(
        syn.images.detach().numpy().copy(),
        syn.labels,
        ipc,
        ds.num_classes,
        "pixel",
        provenance_for(core, ds, cfg, ipc=ipc, init=cfg.init),
    )
    container.history = history
    return container


def distill_objective(images, labels, core: CoreSet, ds: LabeledDataset, cfg: DistillConfig, n_models: int = 4, seed: int = 12345) -> float:
    """Method loss against fixed probe networks and all core-set members.

    Unlike the training loss this has no per-iteration randomness, so
    before/after values are comparable. DC and DM only.
    """
    x = as_tensor(images).detach()
    labels = np.asarray(labels)
    backbone = Arch.parse(cfg.backbone)
    vals = []
    for j in range(n_models):
        net = build_model(backbone, ds.image_shape, ds.num_classes, derive_seed(seed, "probe", j))
        if cfg.method == "DM":
            real = {c: as_tensor(ds.images[core.class_members(ds, c)]) for c in range(ds.num_classes)}
            with torch.no_grad():
                vals.append(float(dm_loss(x, labels, real, net)))
        elif cfg.method == "DC":
            for c in range(ds.num_classes):
                idx = core.class_members(ds, c)
                vals.append(dc_loss(x[labels == c], labels[labels == c], ds.images[idx], ds.labels[idx], net, cfg.dc_granularity).item())
        else:
            raise ConfigError("distill_objective supports DC and DM")
    return float(np.mean(vals))


def write_history_csv(history, path) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "loss", "wall_ms"])
            for it, loss, ms in history:
                w.writerow([it, repr(loss), f"{ms:.3f}"])
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc


class DatasetDistiller(BaseEstimator):
    """Estimator front-end for :func:`distill_run`.

    ``fit(X, y)`` distills the given samples (already pruned, or the full
    set); the result lands in ``X_syn_``/``y_syn_`` and ``container_``.
    """

    def __init__(
        self,
        method="DM",
        ipc=1,
        iterations=200,
        syn_lr=None,
        batch_per_class=32,
        init="real",
        models_per_iteration=1,
        inner_steps=4,
        expert_steps=2,
        student_lr=0.01,
        dc_granularity="global",
        seed=0,
    ):
        self.method = method
        self.ipc = ipc
        self.iterations = iterations
        self.syn_lr = syn_lr
        self.batch_per_class = batch_per_class
        self.init = init
        self.models_per_iteration = models_per_iteration
        self.inner_steps = inner_steps
        self.expert_steps = expert_steps
        self.student_lr = student_lr
        self.dc_granularity = dc_granularity
        self.seed = seed

    def config(self) -> DistillConfig:
        params = self.get_params()
        params.pop("ipc")
        return DistillConfig(**params)

    def fit(self, X, y, num_classes=None):
        X, y = check_images_labels(X, y)
        k = int(num_classes if num_classes is not None else y.max() + 1)
        ds = LabeledDataset(X, y, k)
        self.container_ = distill_run(CoreSet.full(ds), ds, self.config(), self.ipc)
        self.X_syn_ = self.container_.payload
        self.y_syn_ = self.container_.labels
        self.loss_history_ = [loss for _, loss, _ in self.container_.history]
        return self

    def fit_resample(self, X, y):
        self.fit(X, y)
        return self.X_syn_, self.y_syn_


def with_overrides(cfg: DistillConfig, **kw) -> DistillConfig:
    return replace(cfg, **kw)
