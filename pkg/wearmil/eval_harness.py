"""
Leave-one-subject-out evaluation, pooled metrics, modality ablations and
the result tables/figures.
"""
import dataclasses
import math
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from scipy.stats import rankdata  # noqa: E402
from tabulate import tabulate  # noqa: E402

from .bags import cap_instances, filter_modalities, normalize_horizon  # noqa: E402
from .ecg_transforms import MODALITY_ACTIVITY, MODALITY_ECG, MODALITY_SLEEP  # noqa: E402
from .errors import ConfigurationError, DataError  # noqa: E402
from .mil_model import TrainConfig, predict, train  # noqa: E402
from .utils.seed_utils import derive_seed, rng_for  # noqa: E402

# --- Modality sets ---
LETTER_MODALITY = {"E": MODALITY_ECG, "P": MODALITY_ACTIVITY, "S": MODALITY_SLEEP}
MODALITY_SETS = {
    "all": "PSE",
    "ps": "PS",
    "pe": "PE",
    "se": "SE",
    "p": "P",
    "s": "S",
    "e": "E",
}
ABLATION_SETS = ("all", "ps", "pe", "se")
SINGLE_SETS = ("p", "s", "e")

METRIC_NAMES = ("rmse_mean", "rmse_std", "rmse", "mae", "r2", "pearson_r", "spearman_rho", "n")
UNDEFINED = "undefined"
PSS_AXIS = (0.0, 40.0)


def resolve_modalities(modality_set):
    """Maps "all"/"ps"/... or an iterable of P/S/E letters to (key, sorted modality ids)."""
    if isinstance(modality_set, str):
        key = modality_set.lower()
        if key not in MODALITY_SETS:
            raise ConfigurationError(f"unknown modality set '{modality_set}'; expected one of {sorted(MODALITY_SETS)}")
        letters = MODALITY_SETS[key]
    else:
        letters = "".join(sorted(str(m).upper() for m in modality_set))
        if not letters or any(c not in LETTER_MODALITY for c in letters):
            raise ConfigurationError(f"modality set must be a subset of {{P,S,E}}, got {modality_set!r}")
        key = next((k for k, v in MODALITY_SETS.items() if sorted(v) == sorted(letters)), letters.lower())
    return key, sorted(LETTER_MODALITY[c] for c in letters)


@dataclass
class FoldResult:
    held_out_patient: str
    horizon: str
    predictions: list = field(default_factory=list)
    fold_rmse: float = float("nan")
    baseline: list = field(default_factory=list)
    attention: list = field(default_factory=list)
    train_ids: list = field(default_factory=list)
    val_ids: list = field(default_factory=list)
    history: list = field(default_factory=list)
    best_epoch: int = -1
    skipped: str = None


@dataclass
class GlobalMetrics:
    rmse_mean: float
    rmse_std: float
    rmse: float
    mae: float
    r2: float
    pearson_r: float
    spearman_rho: float
    n: int

    def as_dict(self):
        return dataclasses.asdict(self)


@dataclass
class EvaluationRun:
    horizon: str
    modalities: str
    folds: list
    metrics: GlobalMetrics
    baseline: GlobalMetrics

    @property
    def label(self):
        return f"{self.modalities}/{self.horizon}"


# --- Folds ---

def loso_folds(patients, seed, val_fraction=0.2):
    """
    One fold per patient: the patient is the test set; the others are
    shuffled with a seed derived from (seed, held-out id) and split into
    train/val with val size max(1, round(val_fraction * n)).

    Returns:
        list: (test id, train ids, val ids) tuples in sorted patient order.
    """
    patients = sorted(set(patients))
    if len(patients) < 3:
        raise ValueError(f"leave-one-subject-out needs at least 3 patients, got {len(patients)}")
    folds = []
    for test in patients:
        rest = [p for p in patients if p != test]
        order = rng_for(seed, "loso", test).permutation(len(rest))
        shuffled = [rest[i] for i in order]
        n_val = max(1, int(round(val_fraction * len(rest))))
        folds.append((test, sorted(shuffled[n_val:]), sorted(shuffled[:n_val])))
    return folds


# --- Metrics ---

def _pearson(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(np.dot(da, da)) * float(np.dot(db, db)))
    if denom == 0.0:
        return None
    return float(np.dot(da, db) / denom)


def _rmse(errors):
    return float(np.sqrt(np.mean(np.square(errors))))


def compute_metrics(preds, per_fold=None):
    """
    Pooled regression metrics plus the across-fold RMSE summary.

    Args:
        preds (list): (y_hat, y) pairs.
        per_fold (list): Optional fold label per prediction; fold RMSEs are
            computed per label (population std across folds). Without it
            every prediction is its own fold.

    Returns:
        GlobalMetrics: Correlations (and R^2) with zero variance are None.
    """
    if len(preds) < 2:
        raise ValueError(f"compute_metrics needs at least 2 predictions, got {len(preds)}")
    y_hat = np.array([p[0] for p in preds], dtype=np.float64)
    y = np.array([p[1] for p in preds], dtype=np.float64)
    errors = y_hat - y
    labels = list(per_fold) if per_fold is not None else list(range(len(preds)))
    if len(labels) != len(preds):
        raise ValueError("per_fold must label every prediction")
    fold_rmses = []
    for label in dict.fromkeys(labels):
        idx = [i for i, l in enumerate(labels) if l == label]
        fold_rmses.append(_rmse(errors[idx]))
    ss_res = float(np.dot(errors, errors))
    centered = y - y.mean()
    ss_tot = float(np.dot(centered, centered))
    return GlobalMetrics(
        rmse_mean=float(np.mean(fold_rmses)),
        rmse_std=float(np.std(fold_rmses)),
        rmse=_rmse(errors),
        mae=float(np.mean(np.abs(errors))),
        r2=None if ss_tot == 0.0 else 1.0 - ss_res / ss_tot,
        pearson_r=_pearson(y_hat, y),
        spearman_rho=_pearson(rankdata(y_hat, method="average"), rankdata(y, method="average")),
        n=len(preds),
    )


# --- LOSO ---

_WORKER_BAGS = None


def _init_worker(bags):
    global _WORKER_BAGS
    _WORKER_BAGS = bags


def _run_fold(index, fold, horizon, cfg, bags=None):
    test, train_ids, val_ids = fold
    bags = bags if bags is not None else _WORKER_BAGS
    result = FoldResult(held_out_patient=test, horizon=horizon, train_ids=train_ids, val_ids=val_ids)
    train_set = set(train_ids)
    val_set = set(val_ids)
    train_bags = [b for b in bags if b.patient_id in train_set]
    val_bags = [b for b in bags if b.patient_id in val_set]
    test_bags = [b for b in bags if b.patient_id == test]
    if not test_bags:
        result.skipped = "held-out patient has no bag after modality filtering"
        return index, result
    if not train_bags or not val_bags:
        result.skipped = "empty training or validation split after modality filtering"
        return index, result

    fold_cfg = dataclasses.replace(cfg, seed=derive_seed(cfg.seed, "fold", horizon, test))
    params, history = train(train_bags, val_bags, fold_cfg)
    baseline_value = float(np.mean([b.target for b in train_bags]))
    for b in test_bags:
        y_hat, alpha = predict(b, params)
        result.predictions.append((b.bag_id, float(y_hat), float(b.target)))
        result.baseline.append((b.bag_id, baseline_value, float(b.target)))
        for i, weight in enumerate(alpha):
            result.attention.append({
                "patient_id": b.patient_id,
                "horizon": b.horizon,
                "instance": i,
                "modality_id": int(b.modality_ids[i]),
                "instant": b.instants[i].isoformat(),
                "alpha": float(weight),
            })
    result.fold_rmse = _rmse([p[1] - p[2] for p in result.predictions])
    result.history = history
    result.best_epoch = int(min(history, key=lambda h: (h["val_rmse"], h["epoch"]))["epoch"])
    return index, result


def prepare_bags(bags, horizon, modality_ids, max_instances=512, cap_policy="uniform", seed=0, verbose=True):
    """Selects one horizon, filters modalities, then caps; returns (bags, number dropped by the filter)."""
    selected = [b for b in bags if b.horizon == horizon]
    kept, dropped = [], 0
    for b in selected:
        filtered = filter_modalities(b, modality_ids)
        if filtered is None:
            dropped += 1
            continue
        kept.append(cap_instances(filtered, max_instances, seed, cap_policy))
    if verbose and dropped:
        print(f"  -> {dropped} bag(s) emptied by the modality filter and dropped")
    return kept, dropped


def run_loso(bags, horizon_setting, modality_set, cfg=None, jobs=1, max_instances=512,
             cap_policy="uniform", verbose=True):
    """
    Leave-one-subject-out evaluation of one horizon and modality set.

    Each fold trains on its train patients' bags, early-stops on its val
    patients' bags and predicts the held-out patient's bag(s). Folds run in
    `jobs` worker processes; results are ordered by fold.

    Returns:
        tuple: (list of FoldResult, GlobalMetrics over non-skipped folds)

    Raises:
        DataError: when no bag exists for the horizon.
        ConfigurationError: when the modality filter empties every bag.
    """
    cfg = cfg or TrainConfig()
    horizon = normalize_horizon(horizon_setting)
    key, modality_ids = resolve_modalities(modality_set)
    selected = [b for b in bags if b.horizon == horizon]
    if not selected:
        raise DataError(f"no bags for horizon {horizon}")
    kept, _ = prepare_bags(selected, horizon, modality_ids, max_instances, cap_policy, cfg.seed, verbose)
    if not kept:
        raise ConfigurationError(f"modality set '{key}' leaves no instance in any {horizon} bag")

    folds = loso_folds([b.patient_id for b in selected], cfg.seed, cfg.val_fraction)
    if verbose:
        print(f"Running LOSO: horizon={horizon} modalities={key} folds={len(folds)} bags={len(kept)} jobs={jobs}")
    results = [None] * len(folds)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(kept,)) as executor:
            futures = [executor.submit(_run_fold, i, fold, horizon, cfg) for i, fold in enumerate(folds)]
            for future in as_completed(futures):
                i, result = future.result()
                results[i] = result
                if verbose:
                    _print_fold(result)
    else:
        for i, fold in enumerate(folds):
            _, results[i] = _run_fold(i, fold, horizon, cfg, kept)
            if verbose:
                _print_fold(results[i])

    pooled = [(p[1], p[2]) for r in results if not r.skipped for p in r.predictions]
    groups = [r.held_out_patient for r in results if not r.skipped for _ in r.predictions]
    if len(pooled) < 2:
        raise DataError(f"only {len(pooled)} held-out prediction(s) for {horizon}/{key}; metrics need 2")
    metrics = compute_metrics(pooled, groups)
    if verbose:
        skipped = sum(1 for r in results if r.skipped)
        print(f"LOSO complete: {len(results) - skipped} folds evaluated, {skipped} skipped; "
              f"pooled RMSE {metrics.rmse:.3f}, Spearman {_fmt(metrics.spearman_rho)}")
    return results, metrics


def _print_fold(result):
    if result.skipped:
        print(f"  -> Fold {result.held_out_patient}: skipped ({result.skipped})")
    else:
        print(f"  -> Fold {result.held_out_patient}: RMSE {result.fold_rmse:.3f} (best epoch {result.best_epoch})")


def baseline_metrics(folds):
    """Metrics of the predict-train-mean baseline over the same held-out bags."""
    pooled = [(p[1], p[2]) for r in folds if not r.skipped for p in r.baseline]
    groups = [r.held_out_patient for r in folds if not r.skipped for _ in r.baseline]
    return compute_metrics(pooled, groups)


def evaluate(bags, horizon_setting, modality_set, cfg=None, jobs=1, max_instances=512,
             cap_policy="uniform", verbose=True):
    """run_loso plus the baseline, bundled as an EvaluationRun."""
    key, _ = resolve_modalities(modality_set)
    folds, metrics = run_loso(bags, horizon_setting, modality_set, cfg, jobs, max_instances, cap_policy, verbose)
    return EvaluationRun(normalize_horizon(horizon_setting), key, folds, metrics, baseline_metrics(folds))


# --- Report ---

def _fmt(value):
    if value is None:
        return UNDEFINED
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def global_table(runs):
    """Metric x run table; baseline metrics follow as `baseline_<metric>` rows."""
    columns = ["metric"] + [_column_label(r, runs) for r in runs]
    rows = []
    for prefix, attr in (("", "metrics"), ("baseline_", "baseline")):
        for name in METRIC_NAMES:
            row = {"metric": prefix + name}
            for r in runs:
                row[_column_label(r, runs)] = _fmt(getattr(getattr(r, attr), name))
            rows.append(row)
    return pd.DataFrame(rows, columns=columns)


def _column_label(run, runs):
    if len({r.modalities for r in runs}) <= 1:
        return run.horizon
    return run.label


def ablation_table(runs):
    """Modality set x horizon table of RMSE, MAE and Spearman."""
    horizons = sorted({r.horizon for r in runs})
    columns = ["modalities"] + [f"{h}_{m}" for h in horizons for m in ("rmse", "mae", "spearman_rho")]
    rows = {}
    for r in runs:
        row = rows.setdefault(r.modalities, {"modalities": r.modalities})
        row[f"{r.horizon}_rmse"] = _fmt(r.metrics.rmse)
        row[f"{r.horizon}_mae"] = _fmt(r.metrics.mae)
        row[f"{r.horizon}_spearman_rho"] = _fmt(r.metrics.spearman_rho)
    return pd.DataFrame(list(rows.values()), columns=columns)


def folds_table(runs):
    rows = []
    for r in runs:
        for fold in r.folds:
            if fold.skipped:
                rows.append({"horizon": r.horizon, "modalities": r.modalities,
                             "held_out_patient": fold.held_out_patient, "bag_id": "", "y_hat": "",
                             "y": "", "baseline": "", "fold_rmse": "", "skipped": fold.skipped})
                continue
            for (bag_id, y_hat, y), (_, base, _) in zip(fold.predictions, fold.baseline):
                rows.append({"horizon": r.horizon, "modalities": r.modalities,
                             "held_out_patient": fold.held_out_patient, "bag_id": bag_id,
                             "y_hat": _fmt(y_hat), "y": _fmt(y), "baseline": _fmt(base),
                             "fold_rmse": _fmt(fold.fold_rmse), "skipped": ""})
    columns = ["horizon", "modalities", "held_out_patient", "bag_id", "y_hat", "y", "baseline", "fold_rmse", "skipped"]
    return pd.DataFrame(rows, columns=columns)


def attention_table(runs):
    rows = []
    for r in runs:
        for fold in r.folds:
            for entry in fold.attention:
                rows.append(dict(entry, modalities=r.modalities, alpha=_fmt(entry["alpha"])))
    columns = ["modalities", "patient_id", "horizon", "instance", "modality_id", "instant", "alpha"]
    return pd.DataFrame(rows, columns=columns)


def write_scatter(runs, path):
    """Scatter of predicted vs reported PSS with the identity line; axes fixed to [0, 40]."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for r in runs:
        points = [(p[1], p[2]) for f in r.folds if not f.skipped for p in f.predictions]
        if points:
            y_hat, y = zip(*points)
            ax.scatter(y, y_hat, s=16, alpha=0.7, label=r.label)
    ax.plot(PSS_AXIS, PSS_AXIS, color="black", linewidth=1)
    ax.set_xlim(*PSS_AXIS)
    ax.set_ylim(*PSS_AXIS)
    ax.set_xlabel("reported PSS")
    ax.set_ylabel("predicted PSS")
    if runs:
        ax.legend(loc="upper left", fontsize="small")
    limits = {"xlim": ax.get_xlim(), "ylim": ax.get_ylim()}
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    description = f"xlim={limits['xlim'][0]:g},{limits['xlim'][1]:g} ylim={limits['ylim'][0]:g},{limits['ylim'][1]:g}"
    fig.savefig(path, dpi=100, metadata={"Description": description})
    plt.close(fig)
    return limits


def _write_table(frame, out_dir, name):
    frame.to_csv(os.path.join(out_dir, f"{name}.csv"), index=False)
    with open(os.path.join(out_dir, f"{name}.txt"), "w", encoding="utf-8") as f:
        f.write(tabulate(frame.values.tolist(), headers=list(frame.columns), tablefmt="github"))
        f.write("\n")


def report(runs, out_dir=None, ablation=False, verbose=True):
    """
    Renders evaluation runs.

    Writes folds.csv, global.csv/.txt, attention.csv, scatter.png and, for
    ablations, ablation.csv/.txt into `out_dir` when given.

    Returns:
        dict: name -> DataFrame of every table produced.
    """
    tables = {
        "global": global_table(runs),
        "folds": folds_table(runs),
        "attention": attention_table(runs),
    }
    if ablation:
        tables["ablation"] = ablation_table(runs)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        for name in ("global", "ablation"):
            if name in tables:
                _write_table(tables[name], out_dir, name)
        tables["folds"].to_csv(os.path.join(out_dir, "folds.csv"), index=False)
        tables["attention"].to_csv(os.path.join(out_dir, "attention.csv"), index=False)
        write_scatter(runs, os.path.join(out_dir, "scatter.png"))
        if verbose:
            print(f"  -> Wrote report tables and scatter.png to {out_dir}")
    if verbose and runs:
        print(tabulate(tables["global"].values.tolist(), headers=list(tables["global"].columns), tablefmt="github"))
    return tables


def load_runs(folds_csv):
    """
    Rebuilds EvaluationRuns from a folds.csv written by `report`.

    Attention weights and training histories are not part of folds.csv and
    come back empty.
    """
    if not os.path.isfile(folds_csv):
        raise FileNotFoundError(f"folds table '{folds_csv}' not found")
    frame = pd.read_csv(folds_csv, dtype=str, keep_default_na=False)
    missing = [c for c in ("horizon", "modalities", "held_out_patient", "bag_id", "y_hat", "y", "baseline",
                           "fold_rmse", "skipped") if c not in frame.columns]
    if missing:
        raise DataError(f"{folds_csv}: missing column(s) {missing}")
    runs = []
    for (modalities, horizon), group in frame.groupby(["modalities", "horizon"], sort=False):
        folds = {}
        for row in group.to_dict("records"):
            fold = folds.setdefault(row["held_out_patient"], FoldResult(row["held_out_patient"], horizon))
            if row["skipped"]:
                fold.skipped = row["skipped"]
                continue
            fold.predictions.append((row["bag_id"], float(row["y_hat"]), float(row["y"])))
            fold.baseline.append((row["bag_id"], float(row["baseline"]), float(row["y"])))
            fold.fold_rmse = float(row["fold_rmse"])
        fold_list = list(folds.values())
        pooled = [(p[1], p[2]) for f in fold_list if not f.skipped for p in f.predictions]
        groups = [f.held_out_patient for f in fold_list if not f.skipped for _ in f.predictions]
        runs.append(EvaluationRun(horizon, modalities, fold_list, compute_metrics(pooled, groups),
                                  baseline_metrics(fold_list)))
    return runs
