"""Experiment runner: config parsing, data materialization, cells and tables.

An experiment is a grid of (variant, seed) cells over one fixed pair of
source/target datasets. Data are written once as SCRF files and hashed, so
every cell in an invocation reads byte-identical inputs. Each cell writes
its own trace, bound report and result record atomically; the tables are
assembled afterwards in a fixed order.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .adapt import (ABLATION_ROWS, L1_NORMS, L1_SCOPES, PRIOR_MODES, SOURCE_EPOCHS, SOURCE_LR,
                    VARIANTS, AdaptConfig, Variant, accuracy, adapt, train_source, window_stats)
from .nn_core import load_checkpoint, predict, save_checkpoint
from .signal_sim import (MODULATIONS, ChannelProfile, DatasetSpec, EmitterProfile,
                         ReceiverProfile, generate_dataset, read_dataset, stack_records,
                         write_dataset)
from .theory import AssumptionViolation, feasibility_check

log = logging.getLogger(__name__)

ENV_OUTPUT_DIR = "SCRFFI_OUTPUT_DIR"
ENV_WORKERS = "SCRFFI_WORKERS"
WINDOW = 5
SWEEP_AXES = ("lambda1", "lambda2", "lambda3", "beta", "tau", "snr", "num_classes", "prior_mode")
RESULT_COLUMNS = ("task", "variant", "seed", "accuracy_mean", "accuracy_std", "final_accuracy",
                  "in_domain_accuracy", "epochs", "classifier_frozen", "source_hash",
                  "target_hash", "trace")
SUMMARY_COLUMNS = ("task", "variant", "n_seeds", "accuracy_mean", "accuracy_std",
                   "final_accuracy_mean")
VERIFY_TOL = 5e-6  # tables carry 6 decimals


class ConfigError(ValueError):
    """Malformed experiment config; carries the offending field and line."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None,
                 source: str | None = None):
        self.field, self.line, self.source = field, line, source
        where = ":".join(str(p) for p in (source, line) if p is not None)
        prefix = f"{where}: " if where else ""
        super().__init__(f"{prefix}{field + ': ' if field else ''}{message}")


# ---------------------------------------------------------------- config schema

REQUIRED = object()


@dataclass(frozen=True)
class Opt:
    kind: str
    default: object = REQUIRED
    choices: tuple | None = None
    minimum: float | None = None


RECEIVER_SCHEMA = {
    "id": Opt("int", 0),
    "poly_coeffs": Opt("floats2", (0.0, 0.0)),
    "dc_offset": Opt("complex", 0j),
    "phase_rotation": Opt("float", 0.0),
    "gain": Opt("float", 1.0),
    "snr_db": Opt("snr", None),
}
SPREAD_SCHEMA = {
    "poly3": Opt("float", 0.15, minimum=0),
    "poly5": Opt("float", 0.05, minimum=0),
    "gain": Opt("float", 0.1, minimum=0),
    "skew": Opt("float", 0.1, minimum=0),
    "cfo": Opt("float", 0.004, minimum=0),
}
PROFILE_SCHEMA = {
    "poly_coeffs": Opt("floats2", (0.0, 0.0)),
    "iq_gain_imbalance": Opt("float", 1.0),
    "iq_phase_skew": Opt("float", 0.0),
    "carrier_freq_offset": Opt("float", 0.0),
}
SCHEMA = {
    "task": Opt("str"),
    "output_dir": Opt("str", "runs"),
    "workers": Opt("int", 1, minimum=1),
    "repeats": Opt("ints", (0,)),
    "variants": Opt("variants", ("ms_shot",)),
    "dataset": {
        "num_classes": Opt("int", minimum=2),
        "samples_per_class": Opt("int", minimum=1),
        "length": Opt("int", 256, minimum=8),
        "modulation": Opt("str", "bfsk", choices=MODULATIONS),
        "phase_jitter": Opt("float", 0.0, minimum=0),
        "min_separation": Opt("float", 0.0, minimum=0),
        "channel_taps": Opt("complexes", ((1.0, 0.0),)),
        "emitters": {
            "seed": Opt("int", 0),
            "spread": SPREAD_SCHEMA,
            "profiles": Opt("profiles", None),
        },
    },
    "source": {
        "receiver": RECEIVER_SCHEMA,
        "seed": Opt("int", 1),
        "test_seed": Opt("int", 2),
        "per_class_counts": Opt("ints", None),
        "training": {
            "epochs": Opt("int", SOURCE_EPOCHS, minimum=1),
            "lr": Opt("float", SOURCE_LR, minimum=0),
            "batch_size": Opt("int", 64, minimum=2),
        },
    },
    "target": {
        "receiver": RECEIVER_SCHEMA,
        "seed": Opt("int", 3),
        "eval_seed": Opt("int", 4),
        "per_class_counts": Opt("ints", None),
        "imbalance": Opt("floats", None),
    },
    "adapt": {
        "lambda1": Opt("float", 0.3, minimum=0),
        "lambda2": Opt("float", 1.0, minimum=0),
        "lambda3": Opt("float", 0.5, minimum=0),
        "tau": Opt("float", 0.1),
        "beta": Opt("float", 0.995),
        "gamma": Opt("float", None, minimum=0),
        "lr": Opt("float", 0.0006),
        "epochs": Opt("int", 20, minimum=1),
        "batch_size": Opt("int", 64, minimum=2),
        "prior_mode": Opt("str", "uniform", choices=PRIOR_MODES),
        "known_prior": Opt("floats", None),
        "l1_scope": Opt("str", "batch", choices=L1_SCOPES),
        "l1_norm": Opt("str", "sqrt_batch", choices=L1_NORMS),
    },
    "bound": {
        "vc_dim": Opt("int", None, minimum=1),
        "rho": Opt("float", 0.05),
    },
}
REQUIRED_SECTIONS = ("dataset", "source", "target")


def _line_map(node, path=(), out=None) -> dict:
    """Map each key path of a composed YAML tree to its 1-based line."""
    out = {} if out is None else out
    out.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        seen = set()
        for key, value in node.value:
            name = key.value
            if name in seen:
                raise ConfigError("duplicate key", ".".join(path + (name,)),
                                  key.start_mark.line + 1)
            seen.add(name)
            out[path + (name,)] = key.start_mark.line + 1
            _line_map(value, path + (name,), out)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            _line_map(item, path + (str(i),), out)
    return out


class _Ctx:
    def __init__(self, lines: dict, source: str | None):
        self.lines, self.source = lines, source

    def error(self, msg: str, path: tuple):
        line = None
        for i in range(len(path), -1, -1):
            if path[:i] in self.lines:
                line = self.lines[path[:i]]
                break
        raise ConfigError(msg, ".".join(path) or None, line, self.source)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _coerce(v, opt: Opt, path, ctx: _Ctx):
    k = opt.kind
    if v is None and opt.default is None:
        return None
    if k == "int":
        if not isinstance(v, int) or isinstance(v, bool):
            ctx.error(f"expected an integer, got {v!r}", path)
    elif k == "float":
        if not _is_num(v):
            ctx.error(f"expected a number, got {v!r}", path)
        v = float(v)
    elif k == "str":
        if not isinstance(v, str):
            ctx.error(f"expected a string, got {v!r}", path)
        if opt.choices and v not in opt.choices:
            ctx.error(f"must be one of {list(opt.choices)}, got {v!r}", path)
    elif k in ("ints", "floats"):
        if not isinstance(v, list) or not v:
            ctx.error("expected a nonempty list", path)
        want_int = k == "ints"
        for i, x in enumerate(v):
            if not (isinstance(x, int) and not isinstance(x, bool) if want_int else _is_num(x)):
                ctx.error(f"expected {'integers' if want_int else 'numbers'}, got {x!r}",
                          path + (str(i),))
        v = tuple(v) if want_int else tuple(float(x) for x in v)
    elif k == "floats2":
        if not isinstance(v, list) or len(v) != 2 or not all(_is_num(x) for x in v):
            ctx.error("expected a pair of numbers", path)
        v = (float(v[0]), float(v[1]))
    elif k == "complex":
        if _is_num(v):
            v = complex(v)
        elif isinstance(v, list) and len(v) == 2 and all(_is_num(x) for x in v):
            v = complex(v[0], v[1])
        else:
            ctx.error("expected a number or [real, imag]", path)
    elif k == "complexes":
        if not isinstance(v, list) or not v:
            ctx.error("expected a nonempty list of [real, imag] taps", path)
        out = []
        for i, x in enumerate(v):
            out.append(_coerce(x, Opt("complex"), path + (str(i),), ctx))
        v = tuple((z.real, z.imag) for z in out)
    elif k == "snr":
        # null or .inf means noiseless
        if v is None:
            return None
        if _is_num(v):
            v = float(v)
        elif isinstance(v, list) and len(v) == 2 and all(_is_num(x) for x in v):
            v = (float(v[0]), float(v[1]))
        else:
            ctx.error("expected a number, [low, high] or null", path)
    elif k == "variants":
        if not isinstance(v, list) or not v:
            ctx.error("expected a nonempty list of variants", path)
        v = tuple(_variant_entry(x, path + (str(i),), ctx) for i, x in enumerate(v))
    elif k == "profiles":
        if not isinstance(v, list) or not v:
            ctx.error("expected a nonempty list of emitter profiles", path)
        v = tuple(_section(x, PROFILE_SCHEMA, path + (str(i),), ctx) for i, x in enumerate(v))
    if opt.minimum is not None and _is_num(v) and v < opt.minimum:
        ctx.error(f"must be >= {opt.minimum}, got {v}", path)
    return v


def _variant_entry(x, path, ctx: _Ctx):
    if isinstance(x, str):
        if x not in VARIANTS:
            ctx.error(f"unknown variant {x!r}; known: {sorted(VARIANTS)}", path)
        return x
    if isinstance(x, dict):
        allowed = {"name", "use_nn_l1", "use_soft", "use_momentum"}
        for key in x:
            if key not in allowed:
                ctx.error("unknown key", path + (key,))
        if not isinstance(x.get("name"), str):
            ctx.error("custom variant needs a string name", path + ("name",))
        flags = {}
        for key in allowed - {"name"}:
            val = x.get(key, True)
            if not isinstance(val, bool):
                ctx.error("expected true or false", path + (key,))
            flags[key] = val
        try:
            return Variant(x["name"], **flags)
        except ValueError as exc:
            ctx.error(str(exc), path)
    ctx.error("variant must be a name or a mapping of flags", path)


def _section(raw, schema: dict, path: tuple, ctx: _Ctx) -> dict:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        ctx.error("expected a mapping", path)
    for key in raw:
        if key not in schema:
            ctx.error(f"unknown key (allowed: {', '.join(schema)})", path + (str(key),))
    out = {}
    for key, opt in schema.items():
        p = path + (key,)
        if isinstance(opt, dict):
            out[key] = _section(raw.get(key), opt, p, ctx)
        elif key in raw:
            out[key] = _coerce(raw[key], opt, p, ctx)
        elif opt.default is REQUIRED:
            ctx.error("missing required field", p)
        else:
            out[key] = opt.default
    return out


def parse_config_text(text: str, source: str | None = None) -> dict:
    """Parse and validate config text into a normalized mapping."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        raw = yaml.load(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}",
                          line=mark.line + 1 if mark else None, source=source) from None
    if node is None or not isinstance(raw, dict):
        raise ConfigError("config must be a mapping", source=source)
    ctx = _Ctx(_line_map(node), source)
    for name in REQUIRED_SECTIONS:
        if name not in raw:
            ctx.error("missing required section", (name,))
    # the receiver is what distinguishes the two domains; never default it
    for dom in ("source", "target"):
        if not isinstance(raw[dom], dict) or "receiver" not in raw[dom]:
            ctx.error("missing required field", (dom, "receiver"))
    return _section(raw, SCHEMA, (), ctx)


# ---------------------------------------------------------------- built config

def random_emitters(K: int, seed: int, poly3=0.15, poly5=0.05, gain=0.1, skew=0.1,
                    cfo=0.004) -> tuple[EmitterProfile, ...]:
    """Draw ``K`` emitter profiles uniformly within the given half-widths."""
    r = np.random.default_rng(seed)
    out = []
    for k in range(K):
        out.append(EmitterProfile(
            k, (float(r.uniform(-poly3, poly3)), float(r.uniform(-poly5, poly5))),
            float(r.uniform(1 - gain, 1 + gain)), float(r.uniform(-skew, skew)),
            float(r.uniform(-cfo, cfo))))
    return tuple(out)


def _receiver(d: dict) -> ReceiverProfile:
    snr = d["snr_db"]
    snr = math.inf if snr is None else snr
    return ReceiverProfile(d["id"], d["poly_coeffs"], d["dc_offset"], d["phase_rotation"],
                           d["gain"], snr)


def imbalance_counts(ratios, samples_per_class: int) -> tuple[int, ...]:
    """Scale ratios so the largest class gets ``samples_per_class`` records."""
    r = np.asarray(ratios, dtype=np.float64)
    if np.any(r <= 0):
        raise ValueError("imbalance ratios must be > 0")
    return tuple(int(c) for c in np.maximum(np.rint(r / r.max() * samples_per_class), 1))


@dataclass(frozen=True)
class ExperimentConfig:
    task: str
    source: DatasetSpec
    source_test: DatasetSpec
    target: DatasetSpec
    target_eval: DatasetSpec
    adapt: AdaptConfig
    variants: tuple
    repeats: tuple[int, ...]
    output_dir: str
    workers: int
    source_epochs: int
    source_lr: float
    source_batch_size: int
    vc_dim: int | None
    rho: float
    raw: dict

    @property
    def num_classes(self) -> int:
        return self.source.K

    def variant_objects(self) -> list[Variant]:
        return [VARIANTS[v] if isinstance(v, str) else v for v in self.variants]

    def with_override(self, *pairs) -> "ExperimentConfig":
        """Rebuild with ``(key_path, value)`` pairs applied to the raw mapping."""
        raw = copy.deepcopy(self.raw)
        for path, value in pairs:
            node = raw
            for key in path[:-1]:
                node = node[key]
            node[path[-1]] = value
        return build_config(raw)


def build_config(d: dict, source: str | None = None) -> ExperimentConfig:
    """Turn a normalized mapping into dataset specs and an adaptation config."""
    ds = d["dataset"]
    K = ds["num_classes"]

    def fail(msg, field):
        raise ConfigError(msg, field, source=source)

    em = ds["emitters"]
    if em["profiles"] is not None:
        if len(em["profiles"]) != K:
            fail(f"{len(em['profiles'])} profiles for {K} classes", "dataset.emitters.profiles")
        try:
            emitters = tuple(EmitterProfile(k, **p) for k, p in enumerate(em["profiles"]))
        except ValueError as exc:
            fail(str(exc), "dataset.emitters.profiles")
    else:
        emitters = random_emitters(K, em["seed"], **em["spread"])
    taps = tuple(complex(re, im) for re, im in ds["channel_taps"])

    def counts(section, name):
        c = section["per_class_counts"]
        if c is None:
            return (ds["samples_per_class"],) * K
        if len(c) != K or min(c) < 0:
            fail(f"needs {K} nonnegative counts", f"{name}.per_class_counts")
        return tuple(c)

    src, tgt = d["source"], d["target"]
    src_counts = counts(src, "source")
    if tgt["imbalance"] is not None:
        if tgt["per_class_counts"] is not None:
            fail("give either per_class_counts or imbalance, not both", "target.imbalance")
        if len(tgt["imbalance"]) != K:
            fail(f"needs {K} ratios", "target.imbalance")
        try:
            tgt_counts = imbalance_counts(tgt["imbalance"], ds["samples_per_class"])
        except ValueError as exc:
            fail(str(exc), "target.imbalance")
    else:
        tgt_counts = counts(tgt, "target")
    try:
        rx_s, rx_t = _receiver(src["receiver"]), _receiver(tgt["receiver"])
        common = dict(emitters=emitters, channel=ChannelProfile(taps),
                      modulation=ds["modulation"], length=ds["length"],
                      phase_jitter=ds["phase_jitter"], min_separation=ds["min_separation"])
        specs = [DatasetSpec(src_counts, receiver=rx_s, seed=src["seed"], domain="source", **common),
                 DatasetSpec(src_counts, receiver=rx_s, seed=src["test_seed"], domain="source",
                             **common),
                 DatasetSpec(tgt_counts, receiver=rx_t, seed=tgt["seed"], domain="target", **common),
                 DatasetSpec(tgt_counts, receiver=rx_t, seed=tgt["eval_seed"], domain="target",
                             **common)]
        for s in specs:
            s.validate()
    except ValueError as exc:
        fail(str(exc), "dataset")
    a = dict(d["adapt"])
    if a["prior_mode"] == "known":
        if a["known_prior"] is None:
            a["known_prior"] = tuple(float(c) for c in tgt_counts)
    elif a["known_prior"] is not None:
        fail("known_prior is only used with prior_mode: known", "adapt.known_prior")
    try:
        acfg = AdaptConfig(seed=0, **a)
    except ValueError as exc:
        fail(str(exc), "adapt")
    if acfg.batch_size > sum(tgt_counts):
        fail(f"batch_size exceeds the {sum(tgt_counts)} target records", "adapt.batch_size")
    return ExperimentConfig(
        task=d["task"], source=specs[0], source_test=specs[1], target=specs[2],
        target_eval=specs[3], adapt=acfg, variants=d["variants"], repeats=d["repeats"],
        output_dir=d["output_dir"], workers=d["workers"],
        source_epochs=src["training"]["epochs"], source_lr=src["training"]["lr"],
        source_batch_size=src["training"]["batch_size"], vc_dim=d["bound"]["vc_dim"],
        rho=d["bound"]["rho"], raw=d)


CONFIG_DIR = Path(__file__).parent / "configs"


def bundled_config(name: str) -> Path:
    """Path of a config shipped with the package, e.g. ``"cross_receiver"``."""
    return CONFIG_DIR / (name if name.endswith(".yaml") else f"{name}.yaml")


def load_config(path, output_dir: str | None = None, workers: int | None = None
                ) -> ExperimentConfig:
    """Read a config file; env vars then explicit arguments override it.

    A bare name such as ``cross_receiver`` that is not an existing file
    resolves to the bundled config of that name.
    """
    path = Path(path)
    if not path.exists() and bundled_config(str(path)).exists():
        path = bundled_config(str(path))
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", source=str(path)) from None
    d = parse_config_text(text, str(path))
    if os.environ.get(ENV_OUTPUT_DIR):
        d["output_dir"] = os.environ[ENV_OUTPUT_DIR]
    if os.environ.get(ENV_WORKERS):
        try:
            d["workers"] = int(os.environ[ENV_WORKERS])
        except ValueError:
            raise ConfigError(f"{ENV_WORKERS} must be an integer", source="environment") from None
    if output_dir is not None:
        d["output_dir"] = output_dir
    if workers is not None:
        d["workers"] = workers
    if d["workers"] < 1:
        raise ConfigError("must be >= 1", "workers", source=str(path))
    return build_config(d, str(path))


# ---------------------------------------------------------------- file helpers

def atomic_write(path, data: bytes | str):
    """Write via a temp file in the same directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _atomic_dataset(records, path, K):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        write_dataset(records, tmp, K)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_labels(labels, path):
    atomic_write(path, "".join(f"{int(y)}\n" for y in labels))


def read_labels(path) -> np.ndarray:
    text = Path(path).read_text().split()
    return np.array([int(t) for t in text], dtype=np.int64)


# ---------------------------------------------------------------- data

@dataclass(frozen=True)
class DataBundle:
    source: str
    source_test: str
    target: str
    target_labels: str
    target_eval: str
    hashes: dict
    counts: dict
    num_classes: int


def materialize(cfg: ExperimentConfig, data_dir) -> DataBundle:
    """Generate the four datasets and write them (target labels as a sidecar).

    The adaptation target file carries no labels; its ground truth goes into
    a one-label-per-line sidecar used only for evaluation. The labeled
    held-out target set is drawn with a different seed.
    """
    data_dir = Path(data_dir)
    K = cfg.num_classes
    paths = {n: data_dir / f"{n}.scrf" for n in ("source", "source_test", "target", "target_eval")}
    labeled_target = generate_dataset(cfg.target, reveal_labels=True)
    parts = {
        "source": generate_dataset(cfg.source),
        "source_test": generate_dataset(cfg.source_test),
        "target": [replace(r, label=-1) for r in labeled_target],
        "target_eval": generate_dataset(cfg.target_eval, reveal_labels=True),
    }
    for name, recs in parts.items():
        _atomic_dataset(recs, paths[name], K)
    label_path = data_dir / "target.labels"
    write_labels([r.label for r in labeled_target], label_path)
    hashes = {n: sha256_file(p) for n, p in paths.items()}
    counts = {n: np.bincount([r.label for r in recs] if n != "target"
                             else [r.label for r in labeled_target], minlength=K).tolist()
              for n, recs in parts.items()}
    return DataBundle(str(paths["source"]), str(paths["source_test"]), str(paths["target"]),
                      str(label_path), str(paths["target_eval"]), hashes, counts, K)


def load_arrays(path, labels_path=None) -> tuple[np.ndarray, np.ndarray, int]:
    records, K = read_dataset(path)
    x, y = stack_records(records)
    if labels_path is not None:
        y = read_labels(labels_path)
        if len(y) != len(x):
            raise ValueError(f"label sidecar has {len(y)} rows for {len(x)} records")
    return x, y, K


# ---------------------------------------------------------------- cells

@dataclass
class ResultRow:
    task: str
    variant: str
    seed: int
    accuracy_mean: float  # percent, last-WINDOW epochs
    accuracy_std: float
    final_accuracy: float
    in_domain_accuracy: float
    epochs: int
    classifier_frozen: bool
    source_hash: str
    target_hash: str
    trace: str  # relative to the output directory

    def __post_init__(self):
        if self.accuracy_std < 0 or not 0 <= self.accuracy_mean <= 100:
            raise ValueError(f"invalid accuracy summary {self.accuracy_mean}, {self.accuracy_std}")

    def to_tsv(self) -> str:
        vals = []
        for name in RESULT_COLUMNS:
            v = getattr(self, name)
            vals.append(f"{v:.6f}" if isinstance(v, float) else str(v).lower()
                        if isinstance(v, bool) else str(v))
        return "\t".join(vals)


@dataclass(frozen=True)
class SourceJob:
    seed: int
    data: DataBundle
    epochs: int
    lr: float
    batch_size: int
    checkpoint: str


@dataclass(frozen=True)
class CellJob:
    task: str
    variant: Variant
    seed: int
    cfg: AdaptConfig
    data: DataBundle
    source_checkpoint: str
    in_domain: float
    out_dir: str
    stem: str
    vc_dim: int | None
    rho: float


def _source_meta(job: SourceJob) -> dict:
    return {"seed": job.seed, "source_hash": job.data.hashes["source"],
            "source_test_hash": job.data.hashes["source_test"], "epochs": job.epochs,
            "lr": job.lr, "batch_size": job.batch_size}


def run_source(job: SourceJob) -> float:
    """Train (or reuse) the source model for one seed; returns in-domain accuracy."""
    meta_path = Path(job.checkpoint).with_suffix(".json")
    meta = _source_meta(job)
    if meta_path.exists() and Path(job.checkpoint).exists():
        old = json.loads(meta_path.read_text())
        if {k: old.get(k) for k in meta} == meta:
            return float(old["in_domain_accuracy"])
    xs, ys, K = load_arrays(job.data.source)
    model = train_source((xs, ys), epochs=job.epochs, lr=job.lr, seed=job.seed,
                         batch_size=job.batch_size, num_classes=job.data.num_classes)
    tmp = Path(job.checkpoint).with_suffix(".tmp")
    tmp.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, tmp)
    os.replace(tmp, job.checkpoint)
    # evaluate the model as stored, so every later consumer sees the same weights
    model = load_checkpoint(job.checkpoint)
    xt, yt, _ = load_arrays(job.data.source_test)
    acc = accuracy(model, xt, yt)
    atomic_write(meta_path, json.dumps(meta | {"in_domain_accuracy": acc}, indent=1))
    return acc


def bound_report(model, x, cfg: AdaptConfig, q, vc_dim, rho) -> dict:
    _, probs = predict(model, x)
    N, K = probs.shape
    labels = np.eye(K)[np.argmax(probs, axis=1)]
    mode = "estimate" if cfg.prior_mode == "estimate" else "known"
    d = vc_dim if vc_dim is not None and vc_dim <= N else None
    try:
        rep = feasibility_check(labels, q, cfg.resolved_gamma(N), mode, d=d,
                                rho=rho if d is not None else None)
        return rep.to_dict() | {"prior_mode": cfg.prior_mode}
    except AssumptionViolation as exc:
        return {"prior_mode": cfg.prior_mode, "mode": mode, "assumption_violated": str(exc)}


def run_cell(job: CellJob) -> ResultRow:
    """Adapt one (variant, seed) cell and persist its trace and bound report."""
    out = Path(job.out_dir)
    model = load_checkpoint(job.source_checkpoint)
    src_hash = model.classifier_hash()
    ev = load_arrays(job.data.target_eval)[:2]
    x = load_arrays(job.data.target)[0]
    cfg = replace(job.cfg, seed=job.seed)
    if not job.variant.adapt:
        acc = accuracy(model, *ev)
        records = [{"epoch": 0, "accuracy": acc}]
        adapted = model
    else:
        adapted, reps = adapt(model, x, cfg, job.variant, eval_set=ev)
        records = [r.to_dict() for r in reps]
    accs = [r["accuracy"] for r in records]
    mean, std = window_stats(accs, WINDOW)
    trace_rel = f"traces/{job.stem}.jsonl"
    atomic_write(out / trace_rel, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    if job.variant.adapt:
        tmp = out / "models" / f".{job.stem}.tmp"
        save_checkpoint(adapted, tmp)
        os.replace(tmp, out / "models" / f"{job.stem}.ckpt")
        last_q = np.asarray(records[-1]["prior_estimate"])
        bound = bound_report(adapted, x, cfg, last_q, job.vc_dim, job.rho)
        atomic_write(out / "bounds" / f"{job.stem}.json", json.dumps(bound, indent=1, sort_keys=True))
    row = ResultRow(job.task, job.variant.name, job.seed, 100 * mean, 100 * std, 100 * accs[-1],
                    100 * job.in_domain, len(records) if job.variant.adapt else 0,
                    adapted.classifier_hash() == src_hash, job.data.hashes["source"],
                    job.data.hashes["target"], trace_rel)
    atomic_write(out / "cells" / f"{job.stem}.json", json.dumps(asdict(row), indent=1))
    return row


def _map(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def _slug(s: str) -> str:
    return "".join(c if c.isalnum() or c in "-_.=" else "_" for c in s)


def run_experiment(cfg: ExperimentConfig, variants=None, task: str | None = None,
                   data_subdir: str = "data") -> list[ResultRow]:
    """Every (variant, seed) cell of one experiment; rows in config order."""
    out = Path(cfg.output_dir)
    task = task or cfg.task
    variants = cfg.variant_objects() if variants is None else variants
    data = materialize(cfg, out / data_subdir)
    log.info("data %s: source %s target %s", task, data.hashes["source"][:12],
             data.hashes["target"][:12])
    src_tag = data.hashes["source"][:12]
    source_jobs = [SourceJob(s, data, cfg.source_epochs, cfg.source_lr, cfg.source_batch_size,
                             str(out / "models" / f"source_{src_tag}_s{s}.ckpt"))
                   for s in dict.fromkeys(cfg.repeats)]
    in_domain = dict(zip((j.seed for j in source_jobs), _map(run_source, source_jobs, cfg.workers)))
    jobs = []
    for v in variants:
        for s in cfg.repeats:
            stem = _slug(f"{task}__{v.name}__s{s}")
            src_ckpt = next(j.checkpoint for j in source_jobs if j.seed == s)
            jobs.append(CellJob(task, v, s, cfg.adapt, data, src_ckpt, in_domain[s], str(out),
                                stem, cfg.vc_dim, cfg.rho))
    return _map(run_cell, jobs, cfg.workers)


def sweep_configs(cfg: ExperimentConfig, axis: str, values) -> list[tuple[str, ExperimentConfig]]:
    """One config per value; every other knob stays at the config's setting."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis; choose from {list(SWEEP_AXES)}", "axis")
    if len(values) == 0:
        raise ConfigError("empty value list", "values")
    out = []
    for v in values:
        try:
            if axis == "snr":
                # both receivers at the same fixed SNR
                c = cfg.with_override((("source", "receiver", "snr_db"), float(v)),
                                      (("target", "receiver", "snr_db"), float(v)))
            elif axis == "num_classes":
                c = cfg.with_override((("dataset", "num_classes"), int(v)))
            elif axis == "prior_mode":
                pairs = [(("adapt", "prior_mode"), str(v))]
                if v != "known":
                    pairs.append((("adapt", "known_prior"), None))
                c = cfg.with_override(*pairs)
            else:
                c = cfg.with_override((("adapt", axis), float(v)))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad sweep value {v!r}: {exc}", axis) from None
        out.append((f"{axis}={v}", c))
    return out


def run_sweep(cfg: ExperimentConfig, axis: str, values) -> list[ResultRow]:
    rows = []
    data_axis = axis in ("snr", "num_classes")
    for label, c in sweep_configs(cfg, axis, values):
        rows += run_experiment(c, task=f"{cfg.task}[{label}]",
                               data_subdir=f"data/{_slug(label)}" if data_axis else "data")
    return rows


def run_ablation(cfg: ExperimentConfig) -> list[ResultRow]:
    return run_experiment(cfg, variants=[VARIANTS[v] for v in ABLATION_ROWS])


# ---------------------------------------------------------------- tables

def summarize(rows) -> list[dict]:
    """Per (task, variant): mean over seeds of the window means, std across seeds."""
    groups = {}
    for r in rows:
        groups.setdefault((r.task, r.variant), []).append(r)
    out = []
    for (task, variant), rs in groups.items():
        means = np.array([r.accuracy_mean for r in rs])
        out.append({"task": task, "variant": variant, "n_seeds": len(rs),
                    "accuracy_mean": float(means.mean()), "accuracy_std": float(means.std()),
                    "final_accuracy_mean": float(np.mean([r.final_accuracy for r in rs]))})
    return out


def format_results(rows) -> str:
    return "\t".join(RESULT_COLUMNS) + "\n" + "".join(r.to_tsv() + "\n" for r in rows)


def format_summary(summary) -> str:
    lines = ["\t".join(SUMMARY_COLUMNS)]
    for s in summary:
        lines.append("\t".join(f"{s[c]:.6f}" if isinstance(s[c], float) else str(s[c])
                               for c in SUMMARY_COLUMNS))
    return "\n".join(lines) + "\n"


def write_tables(rows, out_dir, name: str = "results") -> tuple[Path, Path]:
    out = Path(out_dir)
    res, summ = out / f"{name}.tsv", out / f"{name}_summary.tsv"
    atomic_write(res, format_results(rows))
    atomic_write(summ, format_summary(summarize(rows)))
    return res, summ


def read_results(path) -> list[ResultRow]:
    lines = Path(path).read_text().splitlines()
    if not lines or tuple(lines[0].split("\t")) != RESULT_COLUMNS:
        raise ValueError(f"{path}: not a results table")
    types = {f.name: f.type for f in fields(ResultRow)}
    rows = []
    for ln in lines[1:]:
        vals = dict(zip(RESULT_COLUMNS, ln.split("\t")))
        kw = {}
        for k, v in vals.items():
            t = types[k]
            kw[k] = (float(v) if t == "float" else int(v) if t == "int"
                     else v == "true" if t == "bool" else v)
        rows.append(ResultRow(**kw))
    return rows


def verify_results(out_dir, name: str = "results") -> list[str]:
    """Recompute each row's window stats from its trace; returns problems found."""
    out = Path(out_dir)
    problems = []
    for r in read_results(out / f"{name}.tsv"):
        where = f"{r.task}/{r.variant}/s{r.seed}"
        try:
            lines = (out / r.trace).read_text().splitlines()
        except OSError:
            problems.append(f"{where}: missing trace {r.trace}")
            continue
        accs = [json.loads(ln)["accuracy"] for ln in lines if ln.strip()]
        if not accs:
            problems.append(f"{where}: empty trace")
            continue
        mean, std = window_stats(accs, WINDOW)
        for label, got, want in (("mean", r.accuracy_mean, 100 * mean),
                                 ("std", r.accuracy_std, 100 * std),
                                 ("final", r.final_accuracy, 100 * accs[-1])):
            if abs(got - want) > VERIFY_TOL:
                problems.append(f"{where}: {label} {got:.6f} != trace {want:.6f}")
    return problems


# ---------------------------------------------------------------- features

def export_features(model, x: np.ndarray, labels: np.ndarray, path):
    """Eval-mode features plus a trailing integer label column, comma separated."""
    feats, _ = predict(model, x)
    labels = np.asarray(labels)
    if len(labels) != len(feats):
        raise ValueError(f"{len(labels)} labels for {len(feats)} records")
    lines = []
    for f, y in zip(feats, labels):
        lines.append(",".join(f"{v:.8e}" for v in f) + f",{int(y)}")
    atomic_write(path, "\n".join(lines) + "\n")
    return feats.shape
