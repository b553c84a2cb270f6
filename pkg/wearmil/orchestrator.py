import dataclasses
import glob
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed

import pandas as pd

from . import ingest_records
from .bags import HORIZONS, build_bags, cap_instances, load_bag_dir, normalize_horizon, tabulate_bag_counts, write_bags
from .cohortsim import generate_cohort
from .ecg_transforms import transform_recording
from .encoder import read_embeddings, reference_encoder, write_embeddings
from .errors import DataError, WearmilError
from .eval_harness import ABLATION_SETS, SINGLE_SETS, evaluate, load_runs, report
from .mil_model import train, write_checkpoint, write_history
from .utils.config_utils import load_run_config, write_provenance
from .utils.seed_utils import rng_for
from .weekly_views import transform_patient_watch

# Stage directories under a pipeline output root
DEFAULT_PIPELINE_DIR = "wearmil-run"
COHORT_DIR = "cohort"
ECG_INSTANCE_DIR = "instances_ecg"
WATCH_INSTANCE_DIR = "instances_watch"
EMBEDDING_DIR = "embeddings"
BAG_DIR = "bags"
EVALUATION_DIR = "evaluation"
STAGE_DIRS = (COHORT_DIR, ECG_INSTANCE_DIR, WATCH_INSTANCE_DIR, EMBEDDING_DIR, BAG_DIR, EVALUATION_DIR)

CHECKPOINT_FILE = "checkpoint.bin"
HISTORY_FILE = "history.csv"
BAG_COUNTS_FILE = "bag_counts.csv"


def _horizons(horizon):
    if str(horizon).lower() == "both":
        return list(HORIZONS)
    return [normalize_horizon(horizon)]


def _train_config(cfg):
    return dataclasses.replace(cfg.train, seed=cfg.seed)


def _map_patients(fn, tasks, jobs):
    """
    Runs fn(*task) for every task, in `jobs` worker processes when jobs > 1.

    Each fn returns a tuple whose first element is the patient id; results
    come back sorted by it.
    """
    if jobs > 1 and len(tasks) > 1:
        results = []
        with ProcessPoolExecutor(max_workers=jobs) as executor:
            futures = [executor.submit(fn, *task) for task in tasks]
            for future in as_completed(futures):
                results.append(future.result())
    else:
        results = [fn(*task) for task in tasks]
    return sorted(results, key=lambda r: r[0])


def _summarize(results, what, out_dir):
    success = sum(1 for r in results if r[-1] is None)
    failed = len(results) - success
    for r in results:
        if r[-1] is not None:
            print(f"  -> Error processing {r[0]}: {r[-1]}. Skipped.")
    print(f"{what} complete. Patients succeeded: {success}, failed: {failed}. Output: '{out_dir}'")
    return success, failed


# --- Simulate ---

def run_simulate(out_dir, cfg=None, argv=None, verbose=True):
    """Generates the synthetic cohort and writes it in the ingestion formats."""
    cfg = cfg or load_run_config(use_env=False)
    sim = cfg.simulate
    print(f"Simulating cohort: {sim.n_patients} patients x {sim.weeks} weeks (seed {cfg.seed})")
    cohort = generate_cohort(sim.n_patients, sim.weeks, cfg.seed, sim, verbose=verbose)
    ingest_records.write_cohort(cohort, out_dir, cfg.watch.activity_features, verbose=verbose)
    write_provenance(out_dir, cfg, "simulate", argv)
    return cohort


# --- Transform ---

def _transform_ecg_patient(patient_id, paths, out_dir, ecg_cfg, png_dir):
    try:
        images, rejected = [], {}
        for path in paths:
            rec = ingest_records.read_ecg_file(path)
            recording_images, recording_rejected = transform_recording(rec, ecg_cfg)
            images.extend(recording_images)
            for reason, count in recording_rejected.items():
                rejected[reason] = rejected.get(reason, 0) + count
        images.sort(key=lambda img: img.instant)
        ingest_records.write_instances(ingest_records.instance_path(out_dir, patient_id, "ecg"), images, png_dir)
        return patient_id, len(paths), len(images), rejected, None
    except (WearmilError, ValueError, OSError) as e:
        return patient_id, len(paths), 0, {}, str(e)


def run_transform_ecg(in_dir, out_dir, cfg=None, jobs=None, argv=None, verbose=True):
    """
    Transforms every ECG recording under `in_dir` (or `in_dir/ecg`) into
    per-patient instance files `<patient>_ecg.npz`.
    """
    cfg = cfg or load_run_config(use_env=False)
    jobs = jobs or cfg.jobs
    ecg_dir = os.path.join(in_dir, ingest_records.ECG_DIR)
    if not os.path.isdir(ecg_dir):
        ecg_dir = in_dir
    paths = ingest_records.list_ecg_files(ecg_dir)
    print(f"Transforming ECG from '{ecg_dir}' into '{out_dir}' ({len(paths)} recordings, jobs={jobs})")
    by_patient = {}
    for path in paths:
        pid = ingest_records.ecg_patient_id(path)
        by_patient.setdefault(pid, []).append(path)

    os.makedirs(out_dir, exist_ok=True)
    png_dir = os.path.join(out_dir, "png") if cfg.ecg.write_png else None
    tasks = [(pid, by_patient[pid], out_dir, cfg.ecg, png_dir) for pid in sorted(by_patient)]
    results = _map_patients(_transform_ecg_patient, tasks, jobs)
    rows = []
    for pid, n_rec, n_img, rejected, error in results:
        if error is None and verbose:
            detail = ", ".join(f"{k}={v}" for k, v in sorted(rejected.items())) or "none"
            print(f"  -> {pid}: {n_rec} recording(s), {n_img} instance(s), rejected windows: {detail}")
        rows.append(dict({"patient_id": pid, "recordings": n_rec, "instances": n_img}, **{
            f"rejected_{reason.replace(' ', '_')}": count for reason, count in rejected.items()}))
    _write_counts(rows, os.path.join(out_dir, "ecg_counts.csv"))
    _summarize(results, "ECG transform", out_dir)
    write_provenance(out_dir, cfg, "transform-ecg", argv)
    return results


def _transform_watch_patient(patient_id, activity, nights, epochs, out_dir, watch_cfg, png_dir):
    try:
        images, counts = transform_patient_watch(activity, nights, epochs, watch_cfg)
        images.sort(key=lambda img: img.instant)
        ingest_records.write_instances(ingest_records.instance_path(out_dir, patient_id, "watch"), images, png_dir)
        return patient_id, len(images), counts, None
    except (WearmilError, ValueError, OSError) as e:
        return patient_id, 0, {}, str(e)


def run_transform_watch(in_dir, out_dir, cfg=None, jobs=None, argv=None, verbose=True):
    """
    Builds weekly activity/sleep heatmaps and nightly hypnograms from the
    tables in `in_dir` into per-patient `<patient>_watch.npz` files.
    """
    cfg = cfg or load_run_config(use_env=False)
    jobs = jobs or cfg.jobs
    if not os.path.isdir(in_dir):
        raise FileNotFoundError(f"input directory '{in_dir}' not found")
    print(f"Transforming smartwatch records from '{in_dir}' into '{out_dir}' (jobs={jobs})")
    activity = _optional_table(os.path.join(in_dir, ingest_records.ACTIVITY_FILE),
                               lambda p: ingest_records.read_activity_csv(p, cfg.watch.activity_features))
    nights = _optional_table(os.path.join(in_dir, ingest_records.SLEEP_NIGHTS_FILE),
                             ingest_records.read_sleep_nights_csv)
    epochs = _optional_table(os.path.join(in_dir, ingest_records.SLEEP_EPOCHS_FILE),
                             ingest_records.read_sleep_epochs_jsonl)
    patients = sorted(set(activity) | set(nights) | set(epochs))
    if not patients:
        raise DataError(f"no smartwatch records found in '{in_dir}'")

    os.makedirs(out_dir, exist_ok=True)
    png_dir = os.path.join(out_dir, "png") if cfg.watch.write_png else None
    tasks = [(pid, activity.get(pid, []), nights.get(pid, []), epochs.get(pid, []), out_dir, cfg.watch, png_dir)
             for pid in patients]
    results = _map_patients(_transform_watch_patient, tasks, jobs)
    rows = []
    for pid, n_img, counts, error in results:
        if error is None and verbose:
            print(f"  -> {pid}: {n_img} instance(s), rejected: "
                  + (", ".join(f"{k}={v}" for k, v in sorted(counts.items())) or "none"))
        rows.append(dict({"patient_id": pid, "instances": n_img}, **counts))
    _write_counts(rows, os.path.join(out_dir, "watch_counts.csv"))
    _summarize(results, "Smartwatch transform", out_dir)
    write_provenance(out_dir, cfg, "transform-watch", argv)
    return results


def _optional_table(path, reader):
    if not os.path.isfile(path):
        print(f"  -> {os.path.basename(path)} not found in input; continuing without it")
        return {}
    return reader(path)


def _write_counts(rows, path):
    columns = []
    for row in rows:
        columns.extend(c for c in row if c not in columns)
    pd.DataFrame(rows, columns=columns).fillna(0).to_csv(path, index=False)


# --- Embed ---

def _embed_patient(patient_id, paths, out_dir, seed, encoder_cfg):
    try:
        encoder = reference_encoder(seed, encoder_cfg)
        images = []
        for path in paths:
            images.extend(ingest_records.read_instances(path))
        images.sort(key=lambda img: img.instant)
        embeddings = encoder.encode_all(images)
        write_embeddings(os.path.join(out_dir, f"{patient_id}.npz"), embeddings)
        return patient_id, len(embeddings), None
    except (WearmilError, ValueError, OSError) as e:
        return patient_id, 0, str(e)


def run_embed(instance_dirs, out_dir, cfg=None, jobs=None, argv=None, verbose=True):
    """Embeds every instance file of every patient with the reference dual encoder."""
    cfg = cfg or load_run_config(use_env=False)
    jobs = jobs or cfg.jobs
    if isinstance(instance_dirs, str):
        instance_dirs = [instance_dirs]
    by_patient = {}
    for instance_dir in instance_dirs:
        for path in ingest_records.list_instance_files(instance_dir):
            stem = os.path.splitext(os.path.basename(path))[0]
            pid = stem.rsplit("_", 1)[0]
            by_patient.setdefault(pid, []).append(path)
    encoder_id = reference_encoder(cfg.seed, cfg.encoder).identity
    print(f"Embedding instances of {len(by_patient)} patients with {encoder_id} (jobs={jobs})")
    os.makedirs(out_dir, exist_ok=True)
    tasks = [(pid, by_patient[pid], out_dir, cfg.seed, cfg.encoder) for pid in sorted(by_patient)]
    results = _map_patients(_embed_patient, tasks, jobs)
    if verbose:
        for pid, n, error in results:
            if error is None:
                print(f"  -> {pid}: {n} embedding(s)")
    _summarize(results, "Embedding", out_dir)
    write_provenance(out_dir, cfg, "embed", argv, {"encoder_id": encoder_id})
    return results


# --- Bag ---

def run_bag(embedding_dir, assessments_path, out_dir, cfg=None, horizon="both", argv=None, verbose=True, cap=None):
    """
    Builds M3/M6 bags from cached embeddings and assessments, writes one container per bag.

    With `cap` set, every bag is capped at `cap` instances under `cfg.bags.cap_policy`
    before it is written. Left as None, bags stay whole so evaluation can
    filter modalities before capping.
    """
    cfg = cfg or load_run_config(use_env=False)
    if not os.path.isdir(embedding_dir):
        raise FileNotFoundError(f"embedding directory '{embedding_dir}' not found")
    embeddings = {}
    for path in sorted(glob.glob(os.path.join(embedding_dir, "*.npz"))):
        pid = os.path.splitext(os.path.basename(path))[0]
        embeddings[pid] = read_embeddings(path)
    assessments = ingest_records.read_assessments_csv(assessments_path)
    print(f"Building bags for {len(embeddings)} patients into '{out_dir}'")
    all_bags = []
    for h in _horizons(horizon):
        bags = build_bags(embeddings, assessments, h, verbose=verbose)
        if cap is not None:
            bags = [cap_instances(b, cap, cfg.seed, cfg.bags.cap_policy) for b in bags]
        print(f"  -> {h}: {len(bags)} bag(s)")
        all_bags.extend(bags)
    write_bags(all_bags, out_dir)
    counts = tabulate_bag_counts(all_bags)
    counts.to_csv(os.path.join(out_dir, BAG_COUNTS_FILE), index=False)
    write_provenance(out_dir, cfg, "bag", argv)
    print(f"Bag construction complete: {len(all_bags)} bags written.")
    return all_bags


# --- Train ---

def run_train(bag_dir, out_dir, cfg=None, horizon="m3", argv=None, verbose=True):
    """
    Fits one model on all bags of one horizon with a patient-level
    train/validation split; writes checkpoint.bin and history.csv.
    """
    cfg = cfg or load_run_config(use_env=False)
    h = normalize_horizon(horizon)
    bags = [cap_instances(b, cfg.bags.max_instances, cfg.seed, cfg.bags.cap_policy)
            for b in load_bag_dir(bag_dir, h, verbose)]
    patients = sorted({b.patient_id for b in bags})
    if len(patients) < 2:
        raise DataError(f"training needs bags of at least 2 patients for {h}, found {len(patients)}")
    train_cfg = _train_config(cfg)
    order = rng_for(cfg.seed, "train_split", h).permutation(len(patients))
    n_val = max(1, int(round(train_cfg.val_fraction * len(patients))))
    val_ids = {patients[i] for i in order[:n_val]}
    train_bags = [b for b in bags if b.patient_id not in val_ids]
    val_bags = [b for b in bags if b.patient_id in val_ids]
    print(f"Training on {len(train_bags)} bags, validating on {len(val_bags)} ({h})")
    params, history = train(train_bags, val_bags, train_cfg, verbose=verbose)
    best = min(history, key=lambda r: (r["val_rmse"], r["epoch"]))
    os.makedirs(out_dir, exist_ok=True)
    write_checkpoint(os.path.join(out_dir, CHECKPOINT_FILE), params, train_cfg.seed, best["epoch"], best["val_rmse"])
    write_history(history, os.path.join(out_dir, HISTORY_FILE))
    write_provenance(out_dir, cfg, "train", argv, {"horizon": h, "val_patients": sorted(val_ids)})
    print(f"Training complete: best epoch {best['epoch']}, val RMSE {best['val_rmse']:.3f}")
    return params, history


# --- Evaluate / ablate / report ---

def run_evaluate(bag_dir, out_dir, cfg=None, horizon="m3", modality_sets=("all",), jobs=None, argv=None,
                 stage="evaluate", verbose=True):
    """LOSO evaluation for each horizon and modality set, rendered into `out_dir`."""
    cfg = cfg or load_run_config(use_env=False)
    jobs = jobs or cfg.jobs
    bags = load_bag_dir(bag_dir, None, verbose)
    runs = []
    for modality_set in modality_sets:
        for h in _horizons(horizon):
            runs.append(evaluate(bags, h, modality_set, _train_config(cfg), jobs,
                                 cfg.bags.max_instances, cfg.bags.cap_policy, verbose))
    report(runs, out_dir, ablation=stage == "ablate", verbose=verbose)
    write_provenance(out_dir, cfg, stage, argv, {
        "horizon": horizon, "modality_sets": list(modality_sets), "bag_dir": os.path.abspath(bag_dir)})
    return runs


def run_ablate(bag_dir, out_dir, cfg=None, horizon="m3", with_single=False, jobs=None, argv=None, verbose=True):
    sets = ABLATION_SETS + (SINGLE_SETS if with_single else ())
    return run_evaluate(bag_dir, out_dir, cfg, horizon, sets, jobs, argv, stage="ablate", verbose=verbose)


def run_report(run_dir, out_dir=None, verbose=True):
    """Re-renders tables and the scatter from an evaluation directory's folds.csv."""
    runs = load_runs(os.path.join(run_dir, "folds.csv"))
    ablation = len({r.modalities for r in runs}) > 1
    return report(runs, out_dir or run_dir, ablation=ablation, verbose=verbose)


# --- Pipeline ---

def _prepare_directories(root, stage_dirs=STAGE_DIRS):
    """
    Prepares fresh stage directories under `root` for a pipeline run.
    Existing stage directories are removed so no output of an earlier run
    leaks into this one.
    """
    print(f"Preparing directories under '{root}'...")
    try:
        os.makedirs(root, exist_ok=True)
        for name in stage_dirs:
            path = os.path.join(root, name)
            if os.path.isdir(path):
                shutil.rmtree(path)
                print(f"  Cleared previous '{name}' directory.")
            os.makedirs(path)
        print("Directory preparation complete.")
    except OSError as e:
        print(f"Error during directory preparation: {e}")
        raise
    return {name: os.path.join(root, name) for name in stage_dirs}


def run_pipeline(out_dir, cfg=None, horizon="m3", modality_sets=("all",), jobs=None, argv=None, verbose=True):
    """
    Runs simulate -> transform ecg -> transform watch -> embed -> bag -> evaluate.

    Args:
        out_dir (str): Root under which every stage writes its own directory.
        cfg (RunConfig): Resolved configuration.
        horizon (str): m3, m6 or both.
        modality_sets (tuple): Modality sets to evaluate.
        jobs (int): Worker processes; defaults to cfg.jobs.

    Returns:
        list: The EvaluationRuns of the final stage.
    """
    cfg = cfg or load_run_config(use_env=False)
    print("Starting wearmil pipeline...")
    print(f"  Output root: {out_dir}")
    print(f"  Seed: {cfg.seed}, jobs: {jobs or cfg.jobs}")

    print("\n--- Preparing Directories ---")
    dirs = _prepare_directories(out_dir)

    steps = (
        ("Simulating Cohort", lambda: run_simulate(dirs[COHORT_DIR], cfg, argv, verbose)),
        ("Transforming ECG", lambda: run_transform_ecg(dirs[COHORT_DIR], dirs[ECG_INSTANCE_DIR], cfg, jobs,
                                                       argv, verbose)),
        ("Transforming Smartwatch Records", lambda: run_transform_watch(dirs[COHORT_DIR], dirs[WATCH_INSTANCE_DIR],
                                                                        cfg, jobs, argv, verbose)),
        ("Embedding Instances", lambda: run_embed([dirs[ECG_INSTANCE_DIR], dirs[WATCH_INSTANCE_DIR]],
                                                  dirs[EMBEDDING_DIR], cfg, jobs, argv, verbose)),
        ("Building Bags", lambda: run_bag(dirs[EMBEDDING_DIR],
                                          os.path.join(dirs[COHORT_DIR], ingest_records.ASSESSMENTS_FILE),
                                          dirs[BAG_DIR], cfg, "both", argv, verbose)),
        ("Evaluating", lambda: run_evaluate(dirs[BAG_DIR], dirs[EVALUATION_DIR], cfg, horizon, modality_sets, jobs,
                                            argv, verbose=verbose)),
    )
    result = None
    for title, step in steps:
        print(f"\n--- {title} ---")
        try:
            result = step()
        except Exception as e:
            print(f"Error during {title.lower()}: {e}", file=sys.stderr)
            raise
    write_provenance(out_dir, cfg, "pipeline", argv, {"horizon": horizon, "modality_sets": list(modality_sets)})
    print("\nwearmil pipeline completed successfully.")
    return result
