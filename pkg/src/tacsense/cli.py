"""Command-line front end: pipeline, train-eval, bench, and synth.

Exit codes: 0 success, 1 usage, 2 input/data error, 3 missing artifact,
4 internal invariant violation. Every artifact embeds the fully resolved
config and the library version.
"""

from __future__ import annotations

import argparse
import json
import platform
import resource
import statistics
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__, dsp, evaluation, hdc, ingest, nn, synth

CONTAINER_NAME = "windows.tww1"
REPORT_NAME = "eval_report.json"
BENCH_NAME = "bench_report.json"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_MISSING = 3
EXIT_INTERNAL = 4


class ConfigError(ValueError):
    """Bad run configuration (unknown key, invalid value)."""


class _UsageError(Exception):
    pass


class StageFailure(Exception):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def _stage(name: str):
    try:
        yield
    except StageFailure:
        raise
    except Exception as exc:
        raise StageFailure(name, exc) from exc


@dataclass
class RunConfig:
    """Flat bag of every tunable; JSON file values are overridden by flags."""

    seed: int = 0
    model: str = "hdc"
    out_dir: str = "out"
    input_dir: str | None = None
    container: str | None = None
    model_path: str | None = None
    iterations: int = 100
    # ingest
    gap_threshold: float = ingest.DEFAULT_GAP_THRESHOLD_S
    min_duration: float = ingest.DEFAULT_MIN_DURATION_S
    tac_threshold_ugL: float = ingest.DEFAULT_TAC_THRESHOLD_UGL
    # dsp
    cutoff_hz: float = dsp.DEFAULT_CUTOFF_HZ
    input_rate_hz: float = dsp.DEFAULT_INPUT_RATE_HZ
    taps: int = dsp.DEFAULT_TAPS
    output_rate_hz: float = dsp.DEFAULT_OUTPUT_RATE_HZ
    window_seconds: float = dsp.DEFAULT_WINDOW_SECONDS
    hop_seconds: float = dsp.DEFAULT_WINDOW_SECONDS
    # hdc
    hdc_dim: int = hdc.DEFAULT_DIM
    hdc_levels: int = hdc.DEFAULT_LEVELS
    hdc_alpha: float = hdc.DEFAULT_REFINE_MARGIN
    hdc_refine_epochs: int = hdc.DEFAULT_REFINE_EPOCHS
    # nn
    nn_learning_rate: float = 1e-3
    nn_batch_size: int = 32
    nn_epochs: int = 15
    svm_l2: float = 1e-4
    # evaluation protocol
    folds: int = 3
    clusters: int = 3
    kmeans_restarts: int = 50
    threshold_step: float = 0.001
    # synthetic data
    n_users: int = 14
    separability: float = 1.0
    target_prevalence: float = 0.37
    sessions_per_user: int = 6
    session_min_seconds: float = 160.0
    session_max_seconds: float = 280.0
    episodes_per_day: float = 1.5
    days: float = 3.0
    inject_gaps: bool = False

    @classmethod
    def load(cls, config_path: str | None, overrides: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        values: dict = {}
        if config_path is not None:
            raw = json.loads(Path(config_path).read_text())
            unknown = set(raw) - known
            if unknown:
                raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
            values.update(raw)
        for key, value in overrides.items():
            if value is not None:
                if key not in known:
                    raise ConfigError(f"unknown config key: {key}")
                values[key] = value
        config = cls(**values)
        if config.model not in ("hdc", "cnn", "svm"):
            raise ConfigError(f"model must be one of hdc|cnn|svm, got {config.model!r}")
        return config

    def resolved(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        return evaluation.config_fingerprint(self.resolved())


def _synth_config(config: RunConfig) -> synth.SynthConfig:
    return synth.SynthConfig(
        n_users=config.n_users,
        session_seconds=(config.session_min_seconds, config.session_max_seconds),
        sessions_per_user=config.sessions_per_user,
        episodes_per_day=config.episodes_per_day,
        days=config.days,
        separability=config.separability,
        target_prevalence=config.target_prevalence,
        seed=config.seed,
        inject_gaps=config.inject_gaps,
    )


def cmd_synth(config: RunConfig) -> Path:
    """Generate the synthetic per-user dataset plus manifest."""
    out = Path(config.out_dir)
    with _stage("synth"):
        manifest = synth.generate_dataset(_synth_config(config), out)
    totals = manifest["totals"]
    print(
        f"synth: {config.n_users} users, {totals['windows']} planned windows, "
        f"prevalence {totals['prevalence']:.4f} -> {out}"
    )
    return out


def _held_tac_at(ends: list[float], tac: list[ingest.TacReading]) -> list[float]:
    times = [r.t for r in tac]
    out = []
    from bisect import bisect_right

    for end in ends:
        pos = bisect_right(times, end) - 1
        out.append(tac[pos].tac if pos >= 0 else float("nan"))
    return out


def cmd_pipeline(config: RunConfig) -> Path:
    """Parse -> segment -> filter -> resample -> window -> label -> serialize."""
    if config.input_dir is None:
        raise ConfigError("pipeline requires --input pointing at the CSV directory")
    input_dir = Path(config.input_dir)
    if not input_dir.is_dir():
        raise FileNotFoundError(f"input directory not found: {input_dir}")
    sensor_files = sorted(input_dir.glob("*_sensor.csv"))
    if not sensor_files:
        raise ingest.IngestError("no input files")

    filter_spec = dsp.FilterSpec(
        cutoff_hz=config.cutoff_hz,
        input_rate_hz=config.input_rate_hz,
        taps=config.taps,
    )
    pre = dsp.PreprocessConfig(
        output_rate_hz=config.output_rate_hz,
        window_seconds=config.window_seconds,
        hop_seconds=config.hop_seconds,
    )

    all_windows: list[np.ndarray] = []
    all_labels: list[int] = []
    all_users: list[str] = []
    all_starts: list[float] = []
    session_maxima: dict[str, list[float]] = {}
    kept = dropped = no_hr = skipped_windows = 0

    for sensor_file in sensor_files:
        user_id = sensor_file.name[: -len("_sensor.csv")]
        tac_file = input_dir / f"{user_id}_tac.csv"
        if not tac_file.exists():
            raise FileNotFoundError(f"missing TAC stream for {user_id}: {tac_file}")
        with _stage("parse"):
            samples = ingest.parse_sensor_csv(sensor_file)
            tac = ingest.parse_tac_csv(tac_file)
        with _stage("segment"):
            sessions = ingest.segment_sessions(
                samples,
                gap_threshold=config.gap_threshold,
                min_duration=config.min_duration,
                user_id=user_id,
            )
            times = sorted({s.t for s in samples})
            runs = 1 + sum(
                1 for a, b in zip(times, times[1:]) if b - a > config.gap_threshold
            ) if times else 0
            kept += len(sessions)
            dropped += runs - len(sessions)
        for session in sessions:
            with _stage("preprocess"):
                channels, t0 = ingest.session_to_channels(session)
                processed = dsp.preprocess_channels(channels, filter_spec, pre)
                if np.isnan(processed[ingest.HR_CHANNEL]).any():
                    no_hr += 1
                    continue
                windows, rel_starts = dsp.make_windows(processed, pre)
            if len(windows) == 0:
                continue
            with _stage("label"):
                starts = [t0 + s for s in rel_starts]
                labels, skipped = ingest.label_windows(
                    starts, config.window_seconds, tac, config.tac_threshold_ugL
                )
                skipped_windows += skipped
                kept_windows = windows[skipped:]
                kept_starts = starts[skipped:]
                ends = [s + config.window_seconds for s in kept_starts]
                held = _held_tac_at(ends, tac)
                if held:
                    session_maxima.setdefault(user_id, []).append(max(held))
            for w, lbl, st in zip(kept_windows, labels, kept_starts):
                all_windows.append(w.astype(np.float32))
                all_labels.append(lbl)
                all_users.append(user_id)
                all_starts.append(st)

    if not all_windows:
        raise ingest.IngestError("pipeline produced no labeled windows")
    user_tac = {u: float(np.mean(v)) for u, v in session_maxima.items() if v}
    meta = {
        "artifact": "window-container",
        "library_version": __version__,
        "config": config.resolved(),
        "config_fingerprint": config.fingerprint(),
    }
    container = dsp.WindowContainer(
        windows=np.stack(all_windows),
        labels=np.array(all_labels, dtype=np.uint8),
        user_ids=all_users,
        window_starts=np.array(all_starts, dtype=np.float64),
        user_tac=user_tac,
        meta=meta,
    )
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / CONTAINER_NAME
    with _stage("serialize"):
        dsp.save_window_container(path, container)
    prevalence = float(np.mean(all_labels))
    print(
        f"pipeline: sessions kept {kept}, dropped {dropped}, no-hr {no_hr}; "
        f"windows {len(all_windows)} (skipped {skipped_windows}), "
        f"prevalence {prevalence:.4f} -> {path}"
    )
    return path


def _fit_model(kind: str, config: RunConfig, train_windows, train_labels, seed: int):
    """Train one model on normalized windows; returns (model, score_fn)."""
    if kind == "hdc":
        memory = hdc.ItemMemory(
            n_channels=train_windows.shape[1],
            dim=config.hdc_dim,
            levels=config.hdc_levels,
            seed=seed,
        )
        memory.fit_ranges(train_windows)
        model = hdc.HdcModel(
            memory,
            refine_margin=config.hdc_alpha,
            refine_epochs=config.hdc_refine_epochs,
        )
        encodings = hdc.encode_windows(train_windows, memory)
        model.train_single_pass(train_windows, train_labels, encodings=encodings)
        model.refine(train_windows, train_labels, encodings=encodings)

        def score(windows: np.ndarray) -> np.ndarray:
            return np.array([model.predict(w)[1] for w in windows])

        return model, score
    train_config = nn.TrainConfig(
        learning_rate=config.nn_learning_rate,
        batch_size=config.nn_batch_size,
        epochs=config.nn_epochs,
        seed=seed,
        l2=config.svm_l2,
    )
    if kind == "cnn":
        model = nn.CnnModel(
            in_channels=train_windows.shape[1],
            input_length=train_windows.shape[2],
            seed=seed,
        )
        nn.train_cnn(model, train_windows, train_labels, train_config)
        return model, model.forward_batch
    if kind == "svm":
        model = nn.SvmHeadModel(
            input_dim=train_windows.shape[1] * train_windows.shape[2], seed=seed
        )
        nn.train_svm(model, train_windows, train_labels, train_config)
        return model, model.forward_batch
    raise ConfigError(f"unknown model kind {kind!r}")


def cmd_train_eval(config: RunConfig) -> Path:
    """Grouped cross-validation plus held-out test evaluation."""
    container_path = Path(config.container or Path(config.out_dir) / CONTAINER_NAME)
    if not container_path.exists():
        raise FileNotFoundError(f"window container not found: {container_path}")
    with _stage("load"):
        container = dsp.load_window_container(container_path)
    windows = container.windows.astype(np.float64)
    labels = container.labels.astype(np.int64)
    users = np.array(container.user_ids)

    with _stage("plan"):
        summaries = []
        for user in sorted(set(container.user_ids)):
            mask = users == user
            summaries.append(
                evaluation.UserSummary(
                    user_id=user,
                    tac_feature=container.user_tac.get(user, 0.0),
                    window_count=int(mask.sum()),
                    intox_window_fraction=float(labels[mask].mean()),
                )
            )
        clusters = evaluation.kmeans_cluster(
            summaries, k=config.clusters, seed=config.seed, restarts=config.kmeans_restarts
        )
        plan = evaluation.build_split_plan(
            summaries, clusters, folds=config.folds, seed=config.seed
        )

    def run_split(train_users: frozenset, eval_users: frozenset, threshold):
        train_mask = np.isin(users, sorted(train_users))
        eval_mask = np.isin(users, sorted(eval_users))
        stats = dsp.fit_normalizer(windows[train_mask])
        train_norm = dsp.normalize_windows(windows[train_mask], stats)
        eval_norm = dsp.normalize_windows(windows[eval_mask], stats)
        model, score_fn = _fit_model(
            config.model, config, train_norm, labels[train_mask], config.seed
        )
        scores = np.asarray(score_fn(eval_norm), dtype=np.float64)
        eval_labels = labels[eval_mask]
        if config.model != "hdc" and threshold == "select":
            threshold = evaluation.select_threshold(
                scores, eval_labels, step=config.threshold_step
            )
        metrics = evaluation.score_metrics(scores, eval_labels, threshold)
        return model, threshold, metrics

    fold_results = []
    with _stage("cross-validation"):
        for i, fold in enumerate(plan.folds):
            threshold = None if config.model == "hdc" else "select"
            _, thr, metrics = run_split(fold.train_users, fold.validation_users, threshold)
            fold_results.append(
                evaluation.FoldResult(
                    index=i + 1,
                    train_users=sorted(fold.train_users),
                    validation_users=sorted(fold.validation_users),
                    threshold=thr,
                    metrics=metrics,
                )
            )

    with _stage("test"):
        non_test = frozenset(s.user_id for s in summaries) - plan.test_users
        if config.model == "hdc":
            test_threshold = None
        else:
            test_threshold = float(
                statistics.median(f.threshold for f in fold_results)
            )
        final_model, test_threshold, test_metrics = run_split(
            non_test, plan.test_users, test_threshold
        )

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with _stage("save-model"):
        if config.model == "hdc":
            model_path = out / "model_hdc.thd1"
            final_model.save(model_path)
        else:
            model_path = out / f"model_{config.model}.tnn1"
            nn.save_checkpoint(final_model, model_path)

    report = evaluation.EvalReport(
        model_kind=config.model,
        library_version=__version__,
        config=config.resolved(),
        config_fingerprint=config.fingerprint(),
        seeds={"seed": config.seed},
        prevalence=float(labels.mean()),
        clusters=plan.clusters,
        folds=fold_results,
        test=evaluation.TestResult(
            users=sorted(plan.test_users),
            threshold=test_threshold,
            metrics=test_metrics,
        ),
    )
    report_path = out / REPORT_NAME
    report_path.write_text(report.to_json())

    rows = [
        (f"{config.model} fold {f.index}", f.metrics, f.threshold) for f in fold_results
    ]
    rows.append((f"{config.model} test", test_metrics, test_threshold))
    print(evaluation.render_metrics_table(rows))
    print(f"train-eval: model -> {model_path}, report -> {report_path}")
    return report_path


@dataclass
class BenchReport:
    model_kind: str
    iterations: int
    mean_latency_s: float
    median_latency_s: float
    p95_latency_s: float
    peak_memory_delta_mb: float
    machine: str
    power: str = "unavailable"

    def to_dict(self) -> dict:
        return asdict(self)


def _machine_descriptor() -> str:
    cpu = platform.processor() or "unknown-cpu"
    try:
        for line in Path("/proc/cpuinfo").read_text().splitlines():
            if line.lower().startswith("model name"):
                cpu = line.split(":", 1)[1].strip()
                break
    except OSError:
        pass
    return f"{platform.platform()} / {cpu}"


def _load_bench_model(path: Path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == hdc.MODEL_MAGIC:
        model = hdc.HdcModel.load(path)
        return "hdc", model, lambda w: model.predict(w)
    model = nn.load_checkpoint(path)
    return model.kind, model, lambda w: model.forward(w)


def cmd_bench(config: RunConfig) -> Path:
    """Single-threaded inference latency/memory harness (warm-up excluded)."""
    if config.model_path is None:
        raise ConfigError("bench requires --model-path pointing at a trained model")
    model_path = Path(config.model_path)
    if not model_path.exists():
        raise FileNotFoundError(f"model file not found: {model_path}")
    if config.iterations < 1:
        raise ConfigError("iterations must be >= 1")

    rss_before_kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    with _stage("load-model"):
        kind, _, infer = _load_bench_model(model_path)

    rng = np.random.default_rng(config.seed)
    w = int(round(config.window_seconds * config.output_rate_hz))
    batch = rng.normal(0.0, 1.0, size=(config.iterations, 7, w))
    for i in range(10):
        infer(batch[i % config.iterations])
    latencies = []
    for i in range(config.iterations):
        start = time.perf_counter()
        infer(batch[i])
        latencies.append(time.perf_counter() - start)
    rss_after_kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss

    ordered = sorted(latencies)
    p95_index = min(len(ordered) - 1, int(np.ceil(0.95 * len(ordered))) - 1)
    report = BenchReport(
        model_kind=kind,
        iterations=config.iterations,
        mean_latency_s=float(np.mean(latencies)),
        median_latency_s=float(np.median(latencies)),
        p95_latency_s=float(ordered[p95_index]),
        peak_memory_delta_mb=max(0.0, (rss_after_kb - rss_before_kb) / 1024.0),
        machine=_machine_descriptor(),
    )
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    payload["config"] = config.resolved()
    payload["config_fingerprint"] = config.fingerprint()
    payload["library_version"] = __version__
    path = out / BENCH_NAME
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(
        f"bench[{kind}]: mean {report.mean_latency_s * 1000:.2f} ms, "
        f"median {report.median_latency_s * 1000:.2f} ms, "
        f"p95 {report.p95_latency_s * 1000:.2f} ms, "
        f"mem +{report.peak_memory_delta_mb:.1f} MB, power unavailable"
    )
    return path


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tacsense", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--model", choices=("hdc", "cnn", "svm"), default=None)
        p.add_argument("--out", dest="out_dir", default=None)

    p = sub.add_parser("pipeline", help="preprocess raw CSVs into a window container")
    add_common(p)
    p.add_argument("--input", dest="input_dir", default=None, help="directory of per-user CSVs")

    p = sub.add_parser("train-eval", help="grouped cross-validation and test evaluation")
    add_common(p)
    p.add_argument("--container", default=None, help="window container path")

    p = sub.add_parser("bench", help="inference latency/memory micro-benchmark")
    add_common(p)
    p.add_argument("--model-path", dest="model_path", default=None)
    p.add_argument("--iterations", type=int, default=None)

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    add_common(p)
    p.add_argument("--n-users", dest="n_users", type=int, default=None)
    p.add_argument("--separability", type=float, default=None)
    p.add_argument("--target-prevalence", dest="target_prevalence", type=float, default=None)
    p.add_argument("--sessions-per-user", dest="sessions_per_user", type=int, default=None)
    p.add_argument("--inject-gaps", dest="inject_gaps", action="store_const", const=True, default=None)
    return parser


COMMANDS = {
    "pipeline": cmd_pipeline,
    "train-eval": cmd_train_eval,
    "bench": cmd_bench,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", flush=True)
        return EXIT_USAGE
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        config = RunConfig.load(args.config, overrides)
        COMMANDS[args.command](config)
        return EXIT_OK
    except StageFailure as failure:
        print(failure, flush=True)
        cause = failure.cause
        if isinstance(cause, FileNotFoundError):
            return EXIT_MISSING
        if isinstance(cause, ValueError):
            return EXIT_DATA
        return EXIT_INTERNAL
    except FileNotFoundError as exc:
        print(exc, flush=True)
        return EXIT_MISSING
    except ValueError as exc:
        print(exc, flush=True)
        return EXIT_DATA
    except AssertionError as exc:
        print(f"internal invariant violation: {exc}", flush=True)
        return EXIT_INTERNAL


if __name__ == "__main__":
    raise SystemExit(main())
