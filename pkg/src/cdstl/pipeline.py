"""Pipeline stages over an artifact directory.

Every stage reads the previous stage's files from ``out`` and writes its own,
so ``run`` (all stages in one go) and the stage-by-stage subcommands produce
the same bytes. Files are written under a ``.partial`` name and renamed once
complete; a failing stage leaves its ``.partial`` files behind.
"""

from __future__ import annotations

import hashlib
import logging
import os
from contextlib import contextmanager
from pathlib import Path

from cdstl.config import ExperimentConfig
from cdstl.data import (
    LabeledDataset,
    dataset_hash,
    load_distilled,
    load_idx,
    make_shapes,
    save_distilled,
    save_idx,
    stratified_holdout,
)
from cdstl.distill import distill_run, record_experts, save_trajectory, write_history_csv
from cdstl.errors import ArtifactIOError, CdstlError, DataFormatError, IntegrityError
from cdstl.evaluation import (
    GRIDS,
    compare_reports,
    evaluate,
    format_delta_table,
    plot_sweep_svg,
    read_report,
    report_tables,
    sweep_r,
    write_delta_csv,
    write_sweep_csv,
    write_table,
)
from cdstl.latentprior import distill_latent_run, pretrain_decoder
from cdstl.nncore import load_model, model_hash, save_model
from cdstl.pruning import load_coreset, prune, save_coreset
from cdstl.training import train_scorer

log = logging.getLogger(__name__)

STAGES = ("make-data", "train-scorer", "prune", "distill", "eval")


def file_hash(path) -> str:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc


def ensure_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ArtifactIOError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise ArtifactIOError(f"output directory {path} is not writable")
    return path


@contextmanager
def artifact(path):
    """Yield a ``.partial`` path; rename it to ``path`` only if the block succeeds."""
    path = Path(path)
    partial = path.with_name(path.name + ".partial")
    yield partial
    try:
        os.replace(partial, path)
    except OSError as exc:
        raise ArtifactIOError(f"cannot finalise {path}: {exc}") from exc


def _write_text(path, text: str) -> None:
    with artifact(path) as tmp:
        try:
            tmp.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise ArtifactIOError(f"cannot write {path}: {exc}") from exc


def read_manifest(path) -> dict:
    try:
        head = Path(path).read_text(encoding="utf-8").splitlines()[0]
    except (OSError, IndexError) as exc:
        raise ArtifactIOError(f"cannot read manifest {path}: {exc}") from exc
    return dict(tok.split("=", 1) for tok in head.split()[2:])


def _expect(what: str, recorded: str, actual: str) -> None:
    if recorded != actual:
        raise IntegrityError(f"{what}: upstream artifact recorded {recorded}, found {actual}; re-run the earlier stage")


# --------------------------------------------------------------------------
# stages


def write_config(cfg: ExperimentConfig, out: Path) -> None:
    _write_text(out / "config.ini", cfg.canonical())


def make_data(cfg: ExperimentConfig, out) -> dict:
    out = ensure_dir(out)
    write_config(cfg, out)
    d = cfg.section("dataset")
    if d["source"] == "shapes":
        full = make_shapes(
            cfg.stage_seed("data"), d["per_class"], d["resolution"], d["classes"], noise=d["noise"], clutter=d["clutter"]
        )
        train, test = stratified_holdout(full, d["test_fraction"], cfg.stage_seed("split"))
    else:
        full = load_idx(d["idx_images"], d["idx_labels"])
        if d["idx_test_images"]:
            train = full
            test = load_idx(d["idx_test_images"], d["idx_test_labels"], full.num_classes, split="test")
        else:
            train, test = stratified_holdout(full, d["test_fraction"], cfg.stage_seed("split"))
    data_dir = ensure_dir(out / "data")
    for name, ds in (("train", train), ("test", test)):
        with artifact(data_dir / f"{name}-images.idx") as img, artifact(data_dir / f"{name}-labels.idx") as lab:
            save_idx(ds, img, lab)
    train, test = load_data(out, check=False)
    hashes = {"config": cfg.config_hash(), "classes": train.num_classes, "train": dataset_hash(train), "test": dataset_hash(test)}
    _write_text(data_dir / "manifest.txt", "data v1 " + " ".join(f"{k}={v}" for k, v in hashes.items()) + "\n")
    log.info("data: %d train / %d test samples", len(train), len(test))
    return hashes


def load_data(out, check: bool = True) -> tuple[LabeledDataset, LabeledDataset]:
    data_dir = Path(out) / "data"
    k = None
    if check:
        meta = read_manifest(data_dir / "manifest.txt")
        k = int(meta["classes"])
    train = load_idx(data_dir / "train-images.idx", data_dir / "train-labels.idx", k)
    test = load_idx(data_dir / "test-images.idx", data_dir / "test-labels.idx", train.num_classes, split="test")
    if check:
        _expect("train split", meta["train"], dataset_hash(train))
        _expect("test split", meta["test"], dataset_hash(test))
    return train, test


def train_scorer_stage(cfg: ExperimentConfig, out) -> str:
    out = ensure_dir(out)
    train, _ = load_data(out)
    s = cfg.section("scorer")
    model = train_scorer(train, cfg.stage_seed("scorer"), s["arch"], s["epochs"], s["lr"], s["batch_size"])
    with artifact(out / "scorer.nnc") as tmp:
        digest = save_model(model, tmp)
    _write_text(
        out / "scorer.txt",
        f"scorer v1 config={cfg.config_hash()} data={dataset_hash(train)} model={digest} arch={s['arch']}\n",
    )
    return digest


def load_scorer(out, train: LabeledDataset):
    meta = read_manifest(Path(out) / "scorer.txt")
    _expect("scorer training data", meta["data"], dataset_hash(train))
    model = load_model(Path(out) / "scorer.nnc")
    _expect("scorer checkpoint", meta["model"], model_hash(model))
    return model


def prune_stage(cfg: ExperimentConfig, out, r=None, mode=None):
    out = ensure_dir(out)
    if r is not None or mode is not None:
        cfg.update("prune", **{k: v for k, v in (("r", r), ("mode", mode)) if v is not None}).validate()
    train, _ = load_data(out)
    scorer = load_scorer(out, train)
    p = cfg.section("prune")
    core = prune(train, scorer, p["r"], p["mode"])
    with artifact(out / "coreset.txt") as tmp:
        save_coreset(core, tmp, config=cfg.config_hash())
    return core


def distill_stage(cfg: ExperimentConfig, out):
    out = ensure_dir(out)
    train, _ = load_data(out)
    core, meta = load_coreset(out / "coreset.txt")
    _expect("core-set source data", meta.get("data", ""), dataset_hash(train))
    _expect("core-set scorer", meta.get("scorer", ""), model_hash(load_model(out / "scorer.nnc")))
    d = cfg.section("distill")
    dcfg = cfg.distill_config()
    experts = None
    if dcfg.method == "MTT":
        experts = record_experts(core, train, dcfg)
        for i, e in enumerate(experts):
            save_trajectory(e, ensure_dir(out / "experts"), f"expert{i}")
    upstream = {
        "experiment_config_hash": cfg.config_hash(),
        "coreset_hash": file_hash(out / "coreset.txt"),
    }
    if d["space"] == "pixel":
        container = distill_run(core, train, dcfg, d["ipc"], experts=experts)
    else:
        decoder = pretrain_decoder(
            train,
            d["decoder_epochs"],
            d["decoder_lr"],
            cfg.stage_seed("decoder"),
            latent_channels=d["latent_channels"],
            min_compression=d["min_compression"],
        )
        with artifact(out / "decoder.nnc") as tmp:
            save_model(decoder, tmp)
        latent, container = distill_latent_run(core, train, dcfg, d["ipc"], decoder, experts=experts)
        latent.provenance.update(upstream)
        with artifact(out / "latent.dst") as tmp:
            save_distilled(latent, tmp)
    container.provenance.update(upstream)
    with artifact(out / "distilled.dst") as tmp:
        save_distilled(container, tmp)
    with artifact(out / "loss_history.csv") as tmp:
        write_history_csv(container.history or (latent.history if d["space"] == "latent" else []), tmp)
    return container


def eval_stage(cfg: ExperimentConfig, out, jobs: int = 1):
    out = ensure_dir(out)
    train, test = load_data(out)
    container = load_distilled(out / "distilled.dst")
    _expect("distilled source data", container.provenance.get("dataset_id", ""), dataset_hash(train))
    _expect("distilled core-set", container.provenance.get("coreset_hash", ""), file_hash(out / "coreset.txt"))
    e = cfg.section("eval")
    report = evaluate(
        container,
        test,
        e["archs"],
        e["repeats"],
        e["train_epochs"],
        e["lr"],
        cfg.stage_seed("eval"),
        jobs=jobs,
        allow_backbone=e["allow_backbone"],
        backbone=cfg.section("distill")["backbone"],
    )
    report.provenance["distilled_hash"] = file_hash(out / "distilled.dst")
    report.provenance["experiment_config_hash"] = cfg.config_hash()
    for name, (header, rows) in report_tables(report).items():
        with artifact(out / name) as tmp:
            write_table(tmp, header, rows)
    return report


def run(cfg: ExperimentConfig, out, jobs: int = 1):
    """All stages in order; a failure carries the stage name in ``exc.stage``."""
    steps = (
        ("make-data", lambda: make_data(cfg, out)),
        ("train-scorer", lambda: train_scorer_stage(cfg, out)),
        ("prune", lambda: prune_stage(cfg, out)),
        ("distill", lambda: distill_stage(cfg, out)),
        ("eval", lambda: eval_stage(cfg, out, jobs)),
    )
    result = None
    for name, step in steps:
        log.info("stage %s", name)
        try:
            result = step()
        except (CdstlError, OSError) as exc:
            exc.stage = name
            raise
    return result


def sweep_stage(cfg: ExperimentConfig, out, grid: str | None = None, jobs: int = 1):
    out = ensure_dir(out)
    train, test = load_data(out)
    scorer = load_scorer(out, train)
    grid = grid or cfg.section("run")["grid"]
    if grid not in GRIDS:
        raise DataFormatError(f"unknown grid {grid!r}")
    d, e = cfg.section("distill"), cfg.section("eval")
    result = sweep_r(
        train,
        test,
        scorer,
        cfg.distill_config(),
        GRIDS[grid],
        cfg.section("run")["sweep_modes"],
        ipc=d["ipc"],
        archs=e["archs"],
        repeats=e["repeats"],
        train_epochs=e["train_epochs"],
        lr=e["lr"],
        seed=cfg.stage_seed("eval"),
        jobs=jobs,
    )
    with artifact(out / f"sweep_{grid}.csv") as tmp:
        write_sweep_csv(result, tmp)
    with artifact(out / f"sweep_{grid}.svg") as tmp:
        plot_sweep_svg(result, tmp, f"{result.method}, {grid} grid")
    return result


def compare_stage(dir_a, dir_b, out=None) -> str:
    rows = compare_reports(read_report(dir_a), read_report(dir_b))
    if out is not None:
        out = ensure_dir(out)
        with artifact(out / "compare.csv") as tmp:
            write_delta_csv(rows, tmp)
    return format_delta_table(rows)
