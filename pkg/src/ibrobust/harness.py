"""End-to-end experiment pipeline: train -> attack -> analyze -> plot.

Stages are idempotent and resumable: each completed stage writes a manifest
keyed by the config hash, and a rerun with the same config skips it. All
emitted files embed the config hash; robustness.csv and norms.csv are
byte-identical across reruns of the same config on the same build.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import AdvResult, LatentSystem, run_attack, tabacof
from .checkpoint import load_model, save_model
from .config import ExperimentConfig, seed_for
from .data import Dataset, load_cifar10, load_mnist, make_synthetic
from .errors import ConfigError, DataError, IbrobustError, StageFailure, TeacherMissing
from .metrics import NormTriple, RobustnessRow, aggregate, perturbation_norms
from .nn import Model, NetworkSpec, build_model
from .objectives import MetricsLog, TrainConfig, accuracy, eval_bpp, train

SAMPLE_COLUMNS = ("id", "label", "target", "pred_clean", "pred_adv", "success",
                  "l0_frac", "l2", "linf", "iters")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class StageManifests:
    def __init__(self, root: Path, config_hash: str):
        self.dir = root / "manifests"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.config_hash = config_hash

    def _path(self, key: str) -> Path:
        return self.dir / f"{key}.json"

    def done(self, key: str) -> bool:
        path = self._path(key)
        if not path.exists():
            return False
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError:
            return False
        return data.get("config_hash") == self.config_hash

    def mark(self, key: str, **extra) -> None:
        payload = {"config_hash": self.config_hash, "stage": key, **extra}
        self._path(key).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def load_dataset(config: ExperimentConfig) -> Dataset:
    if config.dataset == "synthetic":
        s = config.synthetic
        return make_synthetic(s.classes, s.per_class, s.image_size,
                              seed=seed_for(config.master_seed, "data"),
                              noise=s.noise, channels=s.channels)
    if config.data_dir is None:
        raise DataError(f"dataset {config.dataset!r} needs data_dir")
    if config.dataset == "mnist":
        return load_mnist(config.data_dir)
    if config.dataset == "cifar10":
        return load_cifar10(config.data_dir)
    raise DataError(f"dataset {config.dataset!r} not available")


def _dtype(config: ExperimentConfig):
    return np.float64 if config.precision == "f64" else np.float32


def _train_one(config: ExperimentConfig, dataset: Dataset, tier: str, objective: str,
               teacher: Model | None) -> tuple[Model, MetricsLog]:
    t = config.train
    beta = {"base": 0.0, "dvib": t.beta_dvib, "svbi": t.beta_svbi}[objective]
    latent = {"base": 0, "dvib": t.latent_dvib, "svbi": t.latent_svbi}[objective]
    spec = NetworkSpec(tier, dataset.input_shape, dataset.num_classes,
                       objective, beta=beta, latent_channels=latent)
    model = build_model(spec, seed=seed_for(config.master_seed, "init", tier, objective),
                        dtype=_dtype(config), teacher=teacher)
    epochs = t.epochs_svbi if (objective == "svbi" and t.epochs_svbi) else t.epochs
    train_ds = dataset
    if t.train_limit is not None:
        train_ds = Dataset(dataset.name, dataset.train_x[: t.train_limit],
                           dataset.train_y[: t.train_limit], dataset.test_x,
                           dataset.test_y, dataset.num_classes)
    cfg = TrainConfig(
        epochs=epochs, batch_size=t.batch_size, learning_rate=t.learning_rate,
        beta=beta, seed=seed_for(config.master_seed, "train", tier, objective),
        dataset=dataset.name, objective=objective,
    )
    return train(model, cfg, train_ds, teacher=teacher, eval_limit=2000)


@dataclass
class TrainedStack:
    models: dict[tuple[str, str], Model]

    def get(self, tier: str, objective: str) -> Model:
        return self.models[(tier, objective)]


def stage_train(config: ExperimentConfig, dataset: Dataset,
                manifests: StageManifests, root: Path) -> TrainedStack:
    models_dir = root / "models"
    models_dir.mkdir(parents=True, exist_ok=True)
    models: dict[tuple[str, str], Model] = {}
    # base first within each tier: the svbi codec needs its teacher
    ordered = sorted(config.objectives, key=lambda o: 0 if o == "base" else 1)
    for tier in config.tiers:
        for objective in ordered:
            key = f"train_{tier}_{objective}"
            ckpt = models_dir / f"{tier}_{objective}.ckpt"
            if manifests.done(key) and ckpt.exists():
                models[(tier, objective)] = load_model(ckpt)
                continue
            teacher = models.get((tier, "base"))
            if objective == "svbi" and teacher is None:
                raise TeacherMissing(f"{tier}: svbi listed before base was trained")
            try:
                model, log = _train_one(config, dataset, tier, objective, teacher)
            except IbrobustError as e:
                raise StageFailure(key, str(e)) from e
            save_model(model, ckpt)
            log_path = models_dir / f"{tier}_{objective}_train.csv"
            log.save_csv(log_path)
            models[(tier, objective)] = model
            manifests.mark(key, checkpoint=ckpt.name,
                           final_acc=log.final("acc_top1"))
    return TrainedStack(models)


def _write_samples_csv(path: Path, config_hash: str, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"# config_hash={config_hash}\n")
        writer = csv.DictWriter(f, fieldnames=SAMPLE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in SAMPLE_COLUMNS})


def _save_png_pairs(root: Path, combo: str, x: np.ndarray, results: list[AdvResult],
                    count: int) -> None:
    from PIL import Image

    out = root / "samples" / combo
    out.mkdir(parents=True, exist_ok=True)

    def to_img(arr: np.ndarray) -> "Image.Image":
        a = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
        if a.shape[0] == 1:
            return Image.fromarray(a[0], mode="L")
        return Image.fromarray(a.transpose(1, 2, 0), mode="RGB")

    for i in range(min(count, len(results))):
        to_img(x[i]).save(out / f"{i:04d}_clean.png")
        to_img(results[i].x_adv).save(out / f"{i:04d}_adv.png")


def stage_attacks(config: ExperimentConfig, dataset: Dataset, stack: TrainedStack,
                  manifests: StageManifests, root: Path) -> None:
    attacks_dir = root / "attacks"
    attacks_dir.mkdir(parents=True, exist_ok=True)
    limited = dataset.limited(config.sample_limit)
    x_all, y_all = limited.test_x, limited.test_y
    for tier in config.tiers:
        for objective in config.objectives:
            model = stack.get(tier, objective)
            for atk in config.attacks:
                combo = f"{tier}_{objective}_{atk.kind}"
                key = f"attack_{combo}"
                if manifests.done(key):
                    continue
                rows = []
                results: list[AdvResult] = []
                try:
                    bs = config.attack_batch_size
                    for start in range(0, len(x_all), bs):
                        xb = x_all[start : start + bs]
                        yb = y_all[start : start + bs]
                        results.extend(run_attack(model, atk, xb, yb))
                except IbrobustError as e:
                    raise StageFailure(key, str(e)) from e
                for i, r in enumerate(results):
                    rows.append({
                        "id": i, "label": int(y_all[i]), "target": r.target,
                        "pred_clean": r.pred_before, "pred_adv": r.pred_after,
                        "success": r.success, "l0_frac": r.l0_frac, "l2": r.l2,
                        "linf": r.linf, "iters": r.iterations_used,
                    })
                _write_samples_csv(attacks_dir / f"{combo}.csv", manifests.config_hash, rows)
                if config.save_sample_images:
                    _save_png_pairs(root, combo, x_all, results, config.save_sample_images)
                manifests.mark(key, samples=len(rows))


def stage_tabacof(config: ExperimentConfig, dataset: Dataset, stack: TrainedStack,
                  manifests: StageManifests, root: Path) -> None:
    if not config.tabacof.enabled:
        return
    tb = config.tabacof
    attacks_dir = root / "attacks"
    attacks_dir.mkdir(parents=True, exist_ok=True)
    limited = dataset.limited(config.sample_limit)
    x_all, y_all = limited.test_x, limited.test_y
    target_idx = np.flatnonzero(dataset.test_y == tb.target_label)
    if target_idx.size == 0:
        raise StageFailure("tabacof", f"no test image with label {tb.target_label}")
    x_target = dataset.test_x[int(target_idx[0])]
    for tier in config.tiers:
        for objective in tb.objectives:
            combo = f"{tier}_{objective}_tabacof"
            key = f"attack_{combo}"
            if manifests.done(key):
                continue
            system = LatentSystem(stack.get(tier, objective))
            rows = []
            try:
                bs = config.attack_batch_size
                results = []
                for start in range(0, len(x_all), bs):
                    xb = x_all[start : start + bs]
                    results.extend(tabacof(system, xb, x_target, tb.target_label,
                                           lambda_reg=tb.lambda_reg,
                                           max_iters=tb.max_iters, lr=tb.lr))
            except IbrobustError as e:
                raise StageFailure(key, str(e)) from e
            for i, r in enumerate(results):
                rows.append({
                    "id": i, "label": int(y_all[i]), "target": tb.target_label,
                    "pred_clean": r.pred_before, "pred_adv": r.pred_after,
                    "success": r.success, "l0_frac": r.l0_frac, "l2": r.l2,
                    "linf": r.linf, "iters": r.iterations_used,
                })
            _write_samples_csv(attacks_dir / f"{combo}.csv", manifests.config_hash, rows)
            if config.save_sample_images:
                _save_png_pairs(root, combo, x_all, results, config.save_sample_images)
            manifests.mark(key, samples=len(rows))


def _read_samples_csv(path: Path) -> list[dict]:
    rows = []
    with open(path) as f:
        first = f.readline()
        if not first.startswith("# config_hash="):
            raise DataError(f"{path}: missing config hash header")
        reader = csv.DictReader(f)
        for raw in reader:
            rows.append({
                "id": int(raw["id"]), "label": int(raw["label"]),
                "target": int(raw["target"]), "pred_clean": int(raw["pred_clean"]),
                "pred_adv": int(raw["pred_adv"]), "success": raw["success"] == "1",
                "l0_frac": float(raw["l0_frac"]), "l2": float(raw["l2"]),
                "linf": float(raw["linf"]), "iters": int(raw["iters"]),
            })
    return rows


def stage_analyze(config: ExperimentConfig, dataset: Dataset, stack: TrainedStack,
                  manifests: StageManifests, root: Path):
    attacks_dir = root / "attacks"
    limited = dataset.limited(config.sample_limit)
    rows: list[RobustnessRow] = []
    triples: dict[tuple, list[tuple[NormTriple, bool]]] = {}
    hits: dict[tuple, int] = {}
    bpp: dict[tuple, float] = {}
    attack_kinds = [a.kind for a in config.attacks]
    combos = [(t, o, k) for t in config.tiers for o in config.objectives for k in attack_kinds]
    if config.tabacof.enabled:
        combos += [(t, o, "tabacof") for t in config.tiers for o in config.tabacof.objectives]
    clean_acc_cache: dict[tuple, float] = {}
    for tier, objective, kind in combos:
        path = attacks_dir / f"{tier}_{objective}_{kind}.csv"
        if not path.exists():
            continue
        samples = _read_samples_csv(path)
        key = (tier, objective)
        if key not in clean_acc_cache:
            clean_acc_cache[key] = float(np.mean(
                [s["pred_clean"] == s["label"] for s in samples]
            ))
        clean_acc = clean_acc_cache[key]
        adv_acc = float(np.mean([s["pred_adv"] == s["label"] for s in samples]))
        rows.append(RobustnessRow(tier, objective, kind, clean_acc, adv_acc))
        triples[(tier, objective, kind)] = [
            (NormTriple(s["l0_frac"], s["l2"], s["linf"]), s["success"]) for s in samples
        ]
        if kind == "tabacof":
            hits[(tier, objective)] = sum(
                1 for s in samples if s["pred_adv"] == s["target"]
            )
    for (tier, objective), model in stack.models.items():
        value = eval_bpp(model, limited.test_x[: min(len(limited.test_x), 2000)])
        if value is not None:
            bpp[(tier, objective)] = value
    report = aggregate(
        rows, triples, bpp=bpp, hits=hits,
        provenance={
            "config_hash": manifests.config_hash,
            "build": f"ibrobust-{__version__}",
            "seed": config.master_seed,
            "dataset": config.dataset,
            "samples": len(limited.test_x),
        },
    )
    _write_report(root, report, manifests.config_hash)
    manifests.mark("analyze", rows=len(rows))
    return report


def _write_report(root: Path, report, config_hash: str) -> None:
    (root / "report.json").write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n"
    )
    with open(root / "robustness.csv", "w", newline="") as f:
        f.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["tier", "objective", "attack", "clean_acc", "adv_acc", "drop"])
        for key in sorted(report.rows):
            r = report.rows[key]
            writer.writerow([r.tier, r.objective, r.attack,
                             _fmt(r.clean_acc), _fmt(r.adv_acc), _fmt(r.drop_points)])
    with open(root / "norms.csv", "w", newline="") as f:
        f.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["tier", "objective", "attack",
                         "l0_frac_mean", "l2_mean", "linf_mean",
                         "l0_frac_std", "l2_std", "linf_std"])
        for key in sorted(report.norms):
            s = report.norms[key]
            writer.writerow(list(key) + [_fmt(s.l0_frac_mean), _fmt(s.l2_mean),
                                         _fmt(s.linf_mean), _fmt(s.l0_frac_std),
                                         _fmt(s.l2_std), _fmt(s.linf_std)])


def load_report(root: Path):
    """Rehydrate the aggregate report dict written by stage_analyze."""
    path = Path(root) / "report.json"
    if not path.exists():
        raise DataError(f"no report.json under {root}; run analyze first")
    return json.loads(path.read_text())


def run_experiment(config: ExperimentConfig):
    """Execute every stage; returns (report, output_root)."""
    root = Path(config.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    config_hash = config.hash()
    (root / "config.json").write_text(
        json.dumps({**config.to_dict(), "_hash": config_hash}, sort_keys=True, indent=1) + "\n"
    )
    manifests = StageManifests(root, config_hash)
    try:
        dataset = load_dataset(config)
    except IbrobustError as e:
        raise StageFailure("data", str(e)) from e
    stack = stage_train(config, dataset, manifests, root)
    stage_attacks(config, dataset, stack, manifests, root)
    stage_tabacof(config, dataset, stack, manifests, root)
    report = stage_analyze(config, dataset, stack, manifests, root)
    if report.norms:
        from .plots import emit_plots

        emit_plots(report, root, config_hash)
    return report, root
