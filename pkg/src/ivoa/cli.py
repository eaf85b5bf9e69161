"""Command-line pipeline: gen -> label -> train -> infer / eval -> cluster, or all of it at once.

One JSON config drives every command. Missing optional keys take the defaults
below; unknown keys are rejected. Every command writes the resolved config
and seeds next to its outputs, and every output file is written atomically.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis as an
from . import introspection as nn
from .geometry import CameraIntrinsics, default_rig
from .io import atomic_write_json, atomic_write_text
from .labelgen import CLASS_INDEX, CLASSES, OutcomeClass, generate_labels, read_labels, write_dataset
from .monitor import GridSpec
from .perception import BackendKind, BackendParams, PerceptionBackend
from .worldsim import RenderSettings, SessionConfig, StoredSession, make_session, read_pgm, save_session

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

SPLITS = ("train", "test")

# None marks a required key; everything else is a default.
DEFAULTS = {
    "seed": None,
    "rig": {"width": 640, "height": 400, "fx": 400.0, "fy": 400.0, "cx": 319.5, "cy": 199.5,
            "baseline": 0.3, "mount_height": 0.8, "tilt_deg": 22.0},
    "grid": {"x_min": 1.0, "x_max": 2.6, "y_min": -1.0, "y_max": 1.0, "step": 0.1, "radius": 0.1},
    "render": {k: (list(v) if isinstance(v, tuple) else v) for k, v in RenderSettings().__dict__.items()},
    "sessions": {
        split: {"count": None, "n_frames": None, "step": 0.2, "template": "planted", "n_boxes": [1, 3]}
        for split in SPLITS
    },
    "backends": ["SparseConvex"],
    "backend_params": {**BackendParams().__dict__, "n_samples": 9},
    "network": {"conv": [[8, 5, 1, 2], [16, 5, 1, 2], [32, 5, 1, 2]], "fc": [128, 64, 4], "p_drop": 0.5},
    "train": {"lr": 0.01, "momentum": 0.9, "epochs": 5, "batch": 64, "weight_decay": 0.0, "class_weights": None,
              "schedule": "constant"},
    "infer": {"passes": 20, "stride": 20, "kernel": 3, "u_max": None, "frames_per_session": 2},
    "analysis": {"thresholds": [0.0005, 0.001, 0.002, 0.005, 0.01, 0.02, 0.05, None],
                 "top_fraction": 0.5, "k": 2, "pca_dim": None},
}
# keys whose default is None but which may legitimately be left out (None means "off" or "infinite")
OPTIONAL_NULL = {("train", "class_weights"), ("infer", "u_max"), ("analysis", "pca_dim")}


class ConfigError(ValueError):
    """Invalid or incomplete configuration."""


def _merge(defaults, given, path=()):
    if isinstance(defaults, dict):
        if not isinstance(given, dict):
            raise ConfigError(f"{'.'.join(path) or 'config'}: expected an object")
        unknown = sorted(set(given) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config key {'.'.join(path + (unknown[0],))}")
        out = {}
        for key, dv in defaults.items():
            here = path + (key,)
            if key in given:
                out[key] = _merge(dv, given[key], here)
            elif dv is None and here not in OPTIONAL_NULL:
                raise ConfigError(f"missing required config key {'.'.join(here)}")
            else:
                out[key] = copy.deepcopy(dv)
        return out
    return copy.deepcopy(given)


def resolve_config(raw: dict, seed: int | None = None) -> dict:
    cfg = _merge(DEFAULTS, raw)
    if seed is not None:
        cfg["seed"] = int(seed)
    Pipeline(cfg)  # validates every section through the owning constructors
    return cfg


def load_config(path, seed: int | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return resolve_config(raw, seed)


def derive_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([int(seed), *tags]).generate_state(1)[0])


def _inf(v) -> float:
    return math.inf if v is None else float(v)


@dataclass
class Pipeline:
    """Module objects built from a resolved config (construction validates it)."""

    cfg: dict

    def __post_init__(self) -> None:
        c = self.cfg
        try:
            if not isinstance(c["seed"], int) or c["seed"] < 0:
                raise ConfigError("seed must be a non-negative integer")
            r = c["rig"]
            intr = CameraIntrinsics(float(r["fx"]), float(r["fy"]), float(r["cx"]), float(r["cy"]),
                                    int(r["width"]), int(r["height"]))
            self.rig = default_rig(float(r["mount_height"]), float(r["tilt_deg"]), float(r["baseline"]), intr)
            self.grid = GridSpec(**{k: float(v) for k, v in c["grid"].items()})
            rs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in c["render"].items()}
            self.render = RenderSettings(**rs)
            self.sessions = {}
            for split in SPLITS:
                s = c["sessions"][split]
                if int(s["count"]) < 1:
                    raise ConfigError(f"sessions.{split}.count must be >= 1")
                self.sessions[split] = SessionConfig(
                    n_frames=int(s["n_frames"]), step=float(s["step"]), template=s["template"],
                    n_boxes=tuple(int(n) for n in s["n_boxes"]), rig=self.rig, render=self.render)
            if not c["backends"]:
                raise ConfigError("backends must list at least one backend")
            self.backends = [PerceptionBackend(BackendKind(b), BackendParams(**c["backend_params"]))
                             for b in c["backends"]]
            n = c["network"]
            self.spec = nn.NetworkSpec(tuple(nn.ConvLayer(*layer) for layer in n["conv"]), tuple(n["fc"]),
                                       float(n["p_drop"]))
            t = c["train"]
            cw = t["class_weights"]
            self.train = nn.TrainConfig(float(t["lr"]), float(t["momentum"]), int(t["epochs"]), int(t["batch"]),
                                        c["seed"], float(t["weight_decay"]),
                                        None if cw is None else tuple(float(w) for w in cw),
                                        str(t["schedule"]))
            i = c["infer"]
            if int(i["passes"]) < 1 or int(i["stride"]) < 1 or int(i["frames_per_session"]) < 0:
                raise ConfigError("infer.passes and infer.stride must be >= 1, frames_per_session >= 0")
            if int(i["kernel"]) < 1 or int(i["kernel"]) % 2 == 0:
                raise ConfigError("infer.kernel must be odd and >= 1")
            if _inf(i["u_max"]) < 0:
                raise ConfigError("infer.u_max must be non-negative")
            a = c["analysis"]
            th = [_inf(v) for v in a["thresholds"]]
            if not th or any(b < x for x, b in zip(th, th[1:])):
                raise ConfigError("analysis.thresholds must be a non-empty ascending list (null = infinity)")
            if not 0.0 < float(a["top_fraction"]) <= 1.0:
                raise ConfigError("analysis.top_fraction must be in (0, 1]")
            if int(a["k"]) < 1:
                raise ConfigError("analysis.k must be >= 1")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid config: {exc}") from exc

    @property
    def seed(self) -> int:
        return self.cfg["seed"]

    def session_names(self, split: str) -> list[str]:
        return [f"{split}_{i:03d}" for i in range(int(self.cfg["sessions"][split]["count"]))]

    def session_seed(self, split: str, i: int) -> int:
        return derive_seed(self.seed, SPLITS.index(split), i)

    def seeds(self) -> dict:
        return {"seed": self.seed,
                "sessions": {n: self.session_seed(s, i) for s in SPLITS for i, n in enumerate(self.session_names(s))},
                "init": self.seed, "train": self.seed, "infer": self.seed, "kmeans": self.seed}


def echo_config(out_dir, pipe: Pipeline, command: str) -> None:
    atomic_write_json(Path(out_dir) / f"{command}.config.json",
                      {"command": command, "config": pipe.cfg, "seeds": pipe.seeds()})


# ---------------------------------------------------------------- parallel helpers

def _pmap(fn, items, jobs: int):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _gen_one(args):
    cfg, seed, out = args
    save_session(make_session(cfg, seed), out)
    return out


def _label_one(args):
    session_dir, out, gridspec, backend, name = args
    session = StoredSession.open(session_dir)
    rig = session.rig
    patches, n_skipped = [], 0
    for frame, scene in session:
        fl = generate_labels(frame, rig, gridspec, backend, scene)
        patches += fl.patches
        n_skipped += len(fl.skips)
    counts = {c.value: 0 for c in CLASSES}
    for p in patches:
        counts[p.label.value] += 1
    write_dataset(out, patches, {"session": name, "session_seed": session.seed, "backend": backend.to_dict(),
                                 "rig": rig.to_dict(), "grid": gridspec.to_dict(), "counts": counts, "skipped": n_skipped,
                                 "frames": len(session)})
    return name, counts


# ---------------------------------------------------------------- commands

def cmd_gen(pipe: Pipeline, out_dir, jobs: int = 1, log=print) -> list[Path]:
    out = Path(out_dir)
    tasks = []
    for split in SPLITS:
        for i, name in enumerate(pipe.session_names(split)):
            tasks.append((pipe.sessions[split], pipe.session_seed(split, i), out / name))
    done = _pmap(_gen_one, tasks, jobs)
    for path in done:
        log(f"gen {path.name}: {len(StoredSession.open(path))} frames")
    echo_config(out, pipe, "gen")
    return done


def _session_dirs(sessions_dir, names) -> list[Path]:
    root = Path(sessions_dir)
    dirs = [root / n for n in names]
    for d in dirs:
        if not (d / "manifest.json").exists():
            raise FileNotFoundError(f"missing session {d / 'manifest.json'}")
    return dirs


def cmd_label(pipe: Pipeline, sessions_dir, out_dir, backend: PerceptionBackend, jobs: int = 1, log=print):
    names = pipe.session_names("train") + pipe.session_names("test")
    dirs = _session_dirs(sessions_dir, names)
    out = Path(out_dir)
    tasks = [(d, out / n, pipe.grid, backend, n) for d, n in zip(dirs, names)]
    results = _pmap(_label_one, tasks, jobs)
    for name, counts in results:
        log(f"label {backend.kind.value} {name}: " + " ".join(f"{k}={v}" for k, v in counts.items()))
    echo_config(out, pipe, "label")
    return results


@dataclass
class LabeledSet:
    patches: np.ndarray        # (N, 100, 100) uint8
    labels: np.ndarray         # class indices
    refs: list[str]            # "<session>/<frame>_<k>.pgm"
    rows: list                 # LabelRow per patch
    sessions: list[str]


def load_labeled(data_dir, names) -> LabeledSet:
    root = Path(data_dir)
    patches, labels, refs, rows, sess = [], [], [], [], []
    for name in names:
        d = root / name
        for row in read_labels(d / "labels.csv"):
            p = d / "patches" / f"{row.frame_id}_{row.k}.pgm"
            if not p.exists():
                raise FileNotFoundError(f"missing patch {p}")
            patches.append(np.round(read_pgm(p) * 255.0).astype(np.uint8))
            labels.append(CLASS_INDEX[row.label])
            refs.append(f"{name}/{row.frame_id}_{row.k}.pgm")
            rows.append(row)
            sess.append(name)
    arr = np.stack(patches) if patches else np.zeros((0, 100, 100), np.uint8)
    return LabeledSet(arr, np.asarray(labels, dtype=np.int64), refs, rows, sess)


def cmd_train(pipe: Pipeline, data_dir, out_path, log=print) -> nn.TrainResult:
    data = load_labeled(data_dir, pipe.session_names("train"))
    if len(data.labels) == 0:
        raise ValueError(f"no labelled patches under {data_dir}")
    counts = np.bincount(data.labels, minlength=4)
    log(f"train on {len(data.labels)} patches: " + " ".join(f"{c.value}={n}" for c, n in zip(CLASSES, counts)))
    net = nn.init_network(pipe.spec, pipe.seed)
    res = nn.train(net, data.patches, data.labels, pipe.train, log=log)
    out_path = Path(out_path)
    nn.save_network(res.net, out_path)
    atomic_write_json(out_path.with_suffix(".train.json"),
                      {"loss_history": res.history, "class_weights": list(res.class_weights),
                       "class_counts": dict(zip((c.value for c in CLASSES), counts.tolist()))})
    echo_config(out_path.parent, pipe, "train")
    return res


RECORD_COLUMNS = ("patch", "frame_id", "k", "x", "y", "truth", "predicted", "confidence", "uncertainty",
                  "p_tp", "p_fp", "p_fn", "p_tn")


def predict_records(pipe: Pipeline, net: nn.Network, data: LabeledSet):
    keys = [(pipe.session_names("test").index(s), r.frame_id, r.k) for s, r in zip(data.sessions, data.rows)]
    preds = nn.predict_many(net, data.patches, keys, int(pipe.cfg["infer"]["passes"]), pipe.seed)
    u_max = _inf(pipe.cfg["infer"]["u_max"])
    records = [an.record_from_prediction(r.label, p, (r.x, r.y), r.frame_id, r.k, u_max)
               for r, p in zip(data.rows, preds)]
    return records, preds


def records_csv(refs, records, preds) -> str:
    lines = [",".join(RECORD_COLUMNS)]
    for ref, rec, p in zip(refs, records, preds):
        pred = rec.predicted.value if isinstance(rec.predicted, OutcomeClass) else rec.predicted
        lines.append(f"{ref},{rec.frame_id},{rec.k},{rec.point[0]:.3f},{rec.point[1]:.3f},{rec.truth.value},{pred},"
                     f"{rec.confidence:.8f},{rec.uncertainty:.10f}," + ",".join(f"{v:.8f}" for v in p.mean))
    return "\n".join(lines) + "\n"


def read_records(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing records file {path}")
    refs, records = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RECORD_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        for r in reader:
            pred = r["predicted"]
            pred = OutcomeClass(pred) if pred != nn.ABSTAIN else nn.ABSTAIN
            refs.append(r["patch"])
            records.append(an.EvalRecord(OutcomeClass(r["truth"]), pred, float(r["uncertainty"]),
                                         float(r["confidence"]), (float(r["x"]), float(r["y"])),
                                         int(r["frame_id"]), int(r["k"])))
    return refs, records


def cmd_eval(pipe: Pipeline, model_path, data_dir, out_dir, log=print) -> an.EvalReport:
    net = nn.load_network(model_path)
    data = load_labeled(data_dir, pipe.session_names("test"))
    if len(data.labels) == 0:
        raise ValueError(f"no held-out patches under {data_dir}")
    records, preds = predict_records(pipe, net, data)
    report = an.evaluate(records)
    thresholds = [_inf(v) for v in pipe.cfg["analysis"]["thresholds"]]
    sweep = an.uncertainty_sweep(records, thresholds)
    out = Path(out_dir)
    atomic_write_text(out / "records.csv", records_csv(data.refs, records, preds))
    atomic_write_json(out / "report.json", report.to_dict())
    atomic_write_text(out / "sweep.csv", an.sweep_csv(sweep[::-1]))
    echo_config(out, pipe, "eval")
    log("eval accuracy " + " ".join(f"{c}={'n/a' if a is None else f'{a:.3f}'}" for c, a in report.accuracy.items()))
    return report


def cmd_infer(pipe: Pipeline, model_path, sessions_dir, out_dir, log=print) -> list[Path]:
    net = nn.load_network(model_path)
    inf = pipe.cfg["infer"]
    names = pipe.session_names("test")
    dirs = _session_dirs(sessions_dir, names)
    out = Path(out_dir)
    written = []
    for si, (name, d) in enumerate(zip(names, dirs)):
        session = StoredSession.open(d)
        n = min(len(session), int(inf["frames_per_session"]))
        for i in np.linspace(0, len(session) - 1, n).round().astype(int) if n else []:
            frame = session.frame(int(i))
            hm = nn.build_heatmap(net, frame.left, int(inf["passes"]),
                                  derive_seed(pipe.seed, 7, si, frame.frame_id), stride=int(inf["stride"]))
            filt = nn.mean_filter(hm, int(inf["kernel"]))
            stem = f"frame_{frame.frame_id:04d}"
            nn.write_heatmap(out / name, stem, hm)
            nn.write_heatmap(out / name, stem + "_filtered", filt)
            cells = nn.decide_cells(filt, _inf(inf["u_max"]))
            atomic_write_text(out / name / f"{stem}_cells.csv",
                              "\n".join(",".join(c.value if isinstance(c, OutcomeClass) else c for c in row)
                                        for row in cells) + "\n")
            written.append(out / name / f"{stem}.csv")
            log(f"infer {name} frame {frame.frame_id}: {hm.shape[0]}x{hm.shape[1]} heatmap")
    echo_config(out, pipe, "infer")
    return written


def cmd_cluster(pipe: Pipeline, model_path, eval_dir, data_dir, out_dir, log=print) -> an.KMeansResult:
    net = nn.load_network(model_path)
    refs, records = read_records(Path(eval_dir) / "records.csv")
    a = pipe.cfg["analysis"]
    chosen = an.select_failures(records, float(a["top_fraction"]))
    patches = []
    for i in chosen:
        p = Path(data_dir) / refs[i].split("/")[0] / "patches" / refs[i].split("/")[1]
        if not p.exists():
            raise FileNotFoundError(f"missing patch {p}")
        patches.append(np.round(read_pgm(p) * 255.0).astype(np.uint8))
    X = an.embed(net, np.stack(patches))
    k = int(a["k"])
    if len(X) < k:
        raise ValueError(f"nothing to cluster: only {len(X)} failure embeddings for k={k}")
    km = an.kmeans(X, k, pipe.seed)
    viz = an.pca_reduce(X, 2).projected if len(X) >= 2 and X.shape[1] >= 2 else np.zeros((len(X), 2))
    reduced = an.pca_reduce(X, a["pca_dim"]) if len(X) >= 2 else None
    out = Path(out_dir)
    atomic_write_text(out / "clusters.csv", an.clusters_csv([refs[i] for i in chosen], km.assignments, viz))
    atomic_write_json(out / "clusters.json", {
        "n": len(chosen), "k": k, "objective_history": list(km.history), "iterations": km.iterations,
        "sizes": np.bincount(km.assignments, minlength=k).tolist(),
        "predicted": {c: int(sum(1 for i in chosen if records[i].predicted == OutcomeClass(c))) for c in ("FP", "FN")},
        "pca_dim": None if reduced is None else int(reduced.components.shape[0]),
        "pca_explained_variance": None if reduced is None else reduced.explained_variance.tolist()})
    echo_config(out, pipe, "cluster")
    log(f"cluster {len(chosen)} failure patches into sizes {np.bincount(km.assignments, minlength=k).tolist()}")
    return km


def cmd_all(pipe: Pipeline, out_dir, jobs: int = 1, log=print) -> None:
    out = Path(out_dir)
    cmd_gen(pipe, out / "sessions", jobs, log)
    for backend in pipe.backends:
        b = backend.kind.value
        cmd_label(pipe, out / "sessions", out / "labels" / b, backend, jobs, log)
        cmd_train(pipe, out / "labels" / b, out / "models" / f"{b}.ivoanet", log)
        model = out / "models" / f"{b}.ivoanet"
        cmd_eval(pipe, model, out / "labels" / b, out / "eval" / b, log)
        cmd_infer(pipe, model, out / "sessions", out / "heatmaps" / b, log)
        try:
            cmd_cluster(pipe, model, out / "eval" / b, out / "labels" / b, out / "clusters" / b, log)
        except ValueError as exc:
            if "nothing to cluster" not in str(exc):
                raise
            log(f"cluster {b}: skipped ({exc})")
    echo_config(out, pipe, "all")


# ---------------------------------------------------------------- argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ivoa", description="Introspective failure prediction for stereo obstacle detection.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", required=True, help="JSON config file")
        sp.add_argument("--seed", type=int, default=None, help="override every module seed")
        return sp

    sp = common(sub.add_parser("gen", help="render sessions"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--jobs", type=int, default=1)
    sp = common(sub.add_parser("label", help="label every session with one backend"))
    sp.add_argument("--sessions", required=True)
    sp.add_argument("--backend", choices=[k.value for k in BackendKind], default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--jobs", type=int, default=1)
    sp = common(sub.add_parser("train", help="train the introspection network"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="weights file")
    sp = common(sub.add_parser("infer", help="heatmaps for held-out frames"))
    sp.add_argument("--model", required=True)
    sp.add_argument("--sessions", required=True)
    sp.add_argument("--out", required=True)
    sp = common(sub.add_parser("eval", help="score held-out labelled patches"))
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp = common(sub.add_parser("cluster", help="cluster confident failure predictions"))
    sp.add_argument("--model", required=True)
    sp.add_argument("--eval", required=True, help="eval output directory")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp = common(sub.add_parser("all", help="run the whole pipeline"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--jobs", type=int, default=1)
    return p


def _backend(pipe: Pipeline, name: str | None) -> PerceptionBackend:
    if name is None:
        return pipe.backends[0]
    return PerceptionBackend(BackendKind(name), BackendParams(**pipe.cfg["backend_params"]))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    log = print
    try:
        pipe = Pipeline(load_config(args.config, args.seed))
        jobs = max(1, getattr(args, "jobs", 1))
        t0 = time.time()
        if args.command == "gen":
            cmd_gen(pipe, args.out, jobs, log)
        elif args.command == "label":
            cmd_label(pipe, args.sessions, args.out, _backend(pipe, args.backend), jobs, log)
        elif args.command == "train":
            cmd_train(pipe, args.data, args.out, log)
        elif args.command == "infer":
            cmd_infer(pipe, args.model, args.sessions, args.out, log)
        elif args.command == "eval":
            cmd_eval(pipe, args.model, args.data, args.out, log)
        elif args.command == "cluster":
            cmd_cluster(pipe, args.model, args.eval, args.data, args.out, log)
        else:
            cmd_all(pipe, args.out, jobs, log)
        log(f"{args.command} done in {time.time() - t0:.1f} s")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except nn.NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
