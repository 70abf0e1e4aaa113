"""Cross-architecture evaluation of distilled sets and pruning-ratio sweeps."""

from __future__ import annotations

import csv
import io
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cdstl.data import DistilledContainer, LabeledDataset, dataset_hash
from cdstl.errors import ArtifactIOError, CdstlError, ConfigError, DataError
from cdstl.nncore import Arch, Rng, build_model, derive_seed, model_hash, predict_labels, train_sgd, use_single_thread

log = logging.getLogger(__name__)

DEFAULT_ARCHS = ("ConvNetDeep", "MLP", "LinearProbe")
DEFAULT_BACKBONE = "ConvNetS"


class ComparisonError(CdstlError, ValueError):
    exit_code = 3


@dataclass
class EvalReport:
    runs: dict[str, list[float]]
    repeats: int
    test_hash: str
    provenance: dict = field(default_factory=dict)
    baseline: str = "full"
    init_hashes: dict[str, list[str]] = field(default_factory=dict)

    @property
    def archs(self) -> list[str]:
        return list(self.runs)

    def mean(self, arch: str) -> float:
        return float(np.mean(self.runs[arch]))

    def std(self, arch: str) -> float:
        runs = self.runs[arch]
        return float(np.std(runs, ddof=1)) if len(runs) > 1 else float("nan")

    def summary(self) -> dict[str, tuple[float, float]]:
        return {a: (self.mean(a), self.std(a)) for a in self.runs}

    def mean_of_means(self) -> float:
        """Average of the per-architecture means (architectures weighted equally)."""
        return float(np.mean([self.mean(a) for a in self.runs]))

    def mean_of_stds(self) -> float:
        return float(np.mean([self.std(a) for a in self.runs]))

    def pooled(self) -> tuple[float, float]:
        """Mean and sample std over every run of every architecture."""
        allruns = np.concatenate([np.asarray(v) for v in self.runs.values()])
        return float(allruns.mean()), float(allruns.std(ddof=1)) if allruns.size > 1 else float("nan")


def baseline_tag(container: DistilledContainer) -> str:
    prov = container.provenance
    if float(prov.get("r", 1.0)) >= 1.0:
        return "full"
    return f"pruned-{prov.get('mode', 'easy')}"


def _eval_cell(job):
    images, labels, k, arch, seed, epochs, lr, test_images, test_labels = job
    use_single_thread()
    model = build_model(arch, images.shape[1:], k, derive_seed(seed, "init"))
    init_hash = model_hash(model)
    train_sgd(model, images, labels, epochs=epochs, lr=lr, batch_size=images.shape[0], rng=Rng(derive_seed(seed, "batches")))
    acc = float(np.mean(predict_labels(model, test_images) == test_labels)) if len(test_labels) else 0.0
    return acc, init_hash


def run_jobs(fn, jobs: list, n_workers: int = 1) -> list:
    """Map ``fn`` over ``jobs``; results come back in job order whatever the worker count."""
    if n_workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=n_workers, mp_context=ctx) as pool:
        return list(pool.map(fn, jobs))


def check_archs(archs, backbone=DEFAULT_BACKBONE, allow_backbone: bool = False) -> list[Arch]:
    parsed = [Arch.parse(a) for a in archs]
    if not parsed:
        raise ConfigError("at least one evaluation architecture is required")
    if Arch.DECODER in parsed:
        raise ConfigError("a decoder is not a classifier")
    if not allow_backbone and Arch.parse(backbone) in parsed:
        raise ConfigError(
            f"{Arch.parse(backbone).label} is the distillation backbone; evaluation uses unseen "
            "architectures only (pass allow_backbone=True to override)"
        )
    return parsed


def evaluate(
    container: DistilledContainer,
    test: LabeledDataset,
    archs=DEFAULT_ARCHS,
    repeats: int = 5,
    train_epochs: int = 200,
    lr: float = 0.01,
    seed: int = 0,
    *,
    jobs: int = 1,
    same_seed_repeats: bool = False,
    allow_backbone: bool = False,
    backbone: str = DEFAULT_BACKBONE,
    render=None,
) -> EvalReport:
    """Train every architecture ``repeats`` times from scratch on the distilled set only.

    Only the container and the held-out test split are visible here, so real
    training images cannot leak in. Latent containers need ``render`` (a
    callable returning the pixel container).
    """
    if container.space == "latent":
        if render is None:
            raise ConfigError("latent containers must be rendered to pixels before evaluation")
        container = render(container)
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    parsed = check_archs(archs, backbone, allow_backbone)
    if set(np.unique(test.labels).tolist()) - set(np.unique(container.labels).tolist()):
        raise DataError("distilled labels do not cover every class in the test split")
    if container.payload.shape[1:] != test.images.shape[1:]:
        raise ConfigError(f"distilled images {container.payload.shape[1:]} vs test images {test.images.shape[1:]}")

    cells = []
    for arch in parsed:
        for rep in range(repeats):
            cell_seed = derive_seed(seed, "eval", arch.label, 0 if same_seed_repeats else rep)
            cells.append(
                (container.payload, container.labels, container.num_classes, arch, cell_seed, train_epochs, lr, test.images, test.labels)
            )
    results = run_jobs(_eval_cell, cells, jobs)
    runs, hashes = {}, {}
    for (_, _, _, arch, *_), (acc, h) in zip(cells, results):
        runs.setdefault(arch.label, []).append(acc)
        hashes.setdefault(arch.label, []).append(h)
    return EvalReport(runs, repeats, dataset_hash(test), dict(container.provenance), baseline_tag(container), hashes)


# --------------------------------------------------------------------------
# reports on disk


def report_rows(report: EvalReport):
    raw = [(a, i, acc) for a, accs in report.runs.items() for i, acc in enumerate(accs)]
    summary = [(a, report.mean(a), report.std(a)) for a in report.runs]
    return raw, summary


def _write_csv(path, header, rows):
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc


def _fmt(x: float) -> str:
    return repr(float(x))


def report_tables(report: EvalReport, prefix: str = "report") -> dict[str, tuple[list, list]]:
    """File name -> (header, rows) for the raw runs, the summary and the metadata."""
    raw, summary = report_rows(report)
    pooled_mean, pooled_std = report.pooled()
    rows = [(a, _fmt(m), _fmt(s)) for a, m, s in summary]
    rows.append(("mean-of-archs", _fmt(report.mean_of_means()), _fmt(report.mean_of_stds())))
    rows.append(("pooled", _fmt(pooled_mean), _fmt(pooled_std)))
    meta = [("test_hash", report.test_hash), ("repeats", report.repeats), ("baseline", report.baseline)]
    meta += sorted((f"provenance.{k}", v) for k, v in report.provenance.items())
    return {
        f"{prefix}_runs.csv": (["arch", "repeat", "accuracy"], [(a, i, _fmt(x)) for a, i, x in raw]),
        f"{prefix}_summary.csv": (["arch", "mean", "std"], rows),
        f"{prefix}_meta.csv": (["key", "value"], meta),
    }


def write_table(path, header, rows) -> None:
    _write_csv(path, header, rows)


def write_report(report: EvalReport, directory, prefix: str = "report") -> list[Path]:
    directory = Path(directory)
    paths = []
    for name, (header, rows) in report_tables(report, prefix).items():
        _write_csv(directory / name, header, rows)
        paths.append(directory / name)
    return paths


def read_report(directory, prefix: str = "report") -> EvalReport:
    directory = Path(directory)
    try:
        with open(directory / f"{prefix}_runs.csv", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        with open(directory / f"{prefix}_meta.csv", encoding="utf-8") as fh:
            meta = {r["key"]: r["value"] for r in csv.DictReader(fh)}
    except OSError as exc:
        raise ArtifactIOError(f"cannot read report from {directory}: {exc}") from exc
    runs: dict[str, list[float]] = {}
    for r in rows:
        runs.setdefault(r["arch"], []).append(float(r["accuracy"]))
    prov = {k.split(".", 1)[1]: v for k, v in meta.items() if k.startswith("provenance.")}
    return EvalReport(runs, int(meta["repeats"]), meta["test_hash"], prov, meta.get("baseline", "full"))


# --------------------------------------------------------------------------
# comparisons


@dataclass(frozen=True)
class DeltaRow:
    arch: str
    delta_mean_pp: float
    delta_std_pp: float

    @property
    def sign(self) -> str:
        if self.delta_mean_pp > 0:
            return "+"
        if self.delta_mean_pp < 0:
            return "-"
        return "="


def compare_reports(a: EvalReport, b: EvalReport) -> list[DeltaRow]:
    """Per-architecture change from ``b`` to ``a`` in percentage points."""
    if a.test_hash != b.test_hash:
        raise ComparisonError(f"reports were measured on different test sets ({a.test_hash} vs {b.test_hash})")
    if set(a.runs) != set(b.runs):
        raise ComparisonError(f"architecture sets differ: {sorted(a.runs)} vs {sorted(b.runs)}")
    return [
        DeltaRow(arch, 100.0 * (a.mean(arch) - b.mean(arch)), 100.0 * (a.std(arch) - b.std(arch)))
        for arch in a.runs
    ]


def format_delta_table(rows: list[DeltaRow]) -> str:
    out = io.StringIO()
    out.write(f"{'arch':<14}{'d_mean (pp)':>12}{'d_std (pp)':>12}\n")
    for r in rows:
        out.write(f"{r.arch:<14}{r.delta_mean_pp:>+12.2f}{r.delta_std_pp:>+12.2f}  {r.sign}\n")
    return out.getvalue()


def write_delta_csv(rows: list[DeltaRow], path) -> None:
    _write_csv(
        path,
        ["arch", "delta_mean_pp", "delta_std_pp", "sign"],
        [(r.arch, _fmt(r.delta_mean_pp), _fmt(r.delta_std_pp), r.sign) for r in rows],
    )


# --------------------------------------------------------------------------
# sweeps

COARSE_GRID = (0.2, 0.4, 0.6, 0.8, 1.0)
FINE_GRID = (0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 1.0)
BROAD_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
GRIDS = {"coarse": COARSE_GRID, "fine": FINE_GRID, "broad": BROAD_GRID}


@dataclass
class SweepResult:
    cells: dict[tuple[float, str], EvalReport | None]
    reference: EvalReport | None
    method: str = "DM"
    errors: dict[tuple[float, str], str] = field(default_factory=dict)

    @property
    def r_values(self) -> list[float]:
        return sorted({r for r, _ in self.cells})

    @property
    def modes(self) -> list[str]:
        return sorted({m for _, m in self.cells})

    def curve(self, mode: str) -> list[tuple[float, float | None]]:
        out = []
        for r in self.r_values:
            rep = self.cells.get((r, mode))
            out.append((r, rep.mean_of_means() if rep is not None else None))
        return out

    def rows(self):
        rows = []
        for mode in self.modes:
            for r in self.r_values:
                rep = self.cells.get((r, mode))
                if rep is None:
                    rows.append((r, mode, None, None))
                else:
                    rows.append((r, mode, rep.mean_of_means(), rep.mean_of_stds()))
        return rows


def sweep_r(
    train: LabeledDataset,
    test: LabeledDataset,
    scorer,
    cfg,
    r_values=COARSE_GRID,
    modes=("easy", "hard"),
    *,
    ipc: int = 1,
    archs=DEFAULT_ARCHS,
    repeats: int = 5,
    train_epochs: int = 200,
    lr: float = 0.01,
    seed: int = 0,
    jobs: int = 1,
) -> SweepResult:
    """prune -> distill -> evaluate for every (r, mode); r = 1.0 is the reference line."""
    from cdstl.distill import distill_run
    from cdstl.pruning import score_losses, select_coreset

    r_values = sorted(float(r) for r in r_values)
    if any(not 0 < r <= 1 for r in r_values):
        raise ConfigError("r values must lie in (0, 1]")
    if 1.0 not in r_values:
        raise ConfigError("r values must include 1.0 (the full-dataset reference)")
    ranking = score_losses(train, scorer)
    cells, errors, cache = {}, {}, {}
    for mode in modes:
        for r in r_values:
            try:
                core = select_coreset(ranking, r, mode)
                key = core.kept.tobytes()
                if key not in cache:
                    container = distill_run(core, train, cfg, ipc)
                    cache[key] = evaluate(container, test, archs, repeats, train_epochs, lr, seed, jobs=jobs)
                cells[(r, mode)] = cache[key]
                log.info("sweep r=%.2f %s: %.4f", r, mode, cells[(r, mode)].mean_of_means())
            except CdstlError as exc:
                log.warning("sweep cell r=%s mode=%s failed: %s", r, mode, exc)
                cells[(r, mode)] = None
                errors[(r, mode)] = str(exc)
    reference = next((cells[(1.0, m)] for m in modes if cells.get((1.0, m)) is not None), None)
    return SweepResult(cells, reference, cfg.method, errors)


def write_sweep_csv(result: SweepResult, path) -> None:
    rows = [(repr(r), m, "" if mean is None else _fmt(mean), "" if std is None else _fmt(std)) for r, m, mean, std in result.rows()]
    _write_csv(path, ["r", "mode", "mean", "std"], rows)


def plot_sweep_svg(result: SweepResult, path, title: str | None = None) -> None:
    """Accuracy vs relative dataset size, one line per mode, dashed line at the r=1.0 mean."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "cdstl", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for mode in result.modes:
            pts = [(100 * r, 100 * m) for r, m in result.curve(mode) if m is not None]
            if pts:
                xs, ys = zip(*pts)
                (line,) = ax.plot(xs, ys, marker="o", label=mode)
                line.set_gid(f"curve-{mode}")
        if result.reference is not None:
            ref = ax.axhline(100 * result.reference.mean_of_means(), linestyle="--", color="gray", label="100%")
            ref.set_gid("reference-line")
        ax.set_xlabel("relative dataset size (%)")
        ax.set_ylabel("accuracy (%)")
        ax.set_title(title or f"{result.method}: accuracy vs core-set size")
        ax.legend()
        fig.tight_layout()
        try:
            fig.savefig(path, format="svg", metadata={"Date": None})
        except OSError as exc:
            raise ArtifactIOError(f"cannot write {path}: {exc}") from exc
        finally:
            plt.close(fig)
