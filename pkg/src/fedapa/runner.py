"""Config-driven experiment runner and summary tables.

A config is a flat ``key = value`` text file; ``#`` starts a comment. Every
key below is optional and unknown keys are rejected::

    mode = fedapa                  # fedapa | uniform_proto | local_only |
                                   # fedapa_no_lc | fedapa_static_lambda(0.5)
    rounds = 200
    seed = 0
    out_dir = runs/fedapa-s0
    arch = large                   # one preset, or N comma-separated presets
    lr = 0.01
    momentum = 0.5
    weight_decay = 1e-05
    batch_size = 16
    local_epochs = 1
    tau_agg = 0.5
    tau_loss = 0.5
    d_feat = 256
    lambda_min = 0.0
    lambda_max = 1.0
    T_warm = 50
    padding = mean                 # mean | sample_weighted
    exclude_self = false
    workers = 1
    diagnostics = light            # none | light | full
    diag_every = 10
    data.csv =                     # empty means synthetic
    data.num_clients = 6           # remaining data.* keys configure the generator
    ...

The synthetic generator is seeded with ``seed``, so each seed gives a new
partition as well as a new initialization.
"""

from __future__ import annotations

import csv
import io
import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .client import ClientState, RoundClientStats, client_update, evaluate
from .data import ClientDataset, DataError, SynthSpec, generate_synthetic, load_dataset_csv
from .diagnostics import (
    ConvergenceTrace,
    TraceRecord,
    encoder_lipschitz_probe,
    regularizer_sensitivity,
    smoothness_probe,
    variance_probe,
)
from .losses import WarmupSchedule
from .metrics import (
    REFERENCE_ARCHITECTURES,
    CostModel,
    complete_round_bytes,
    fedapa_round_bytes,
    last_rounds_mean,
    model_sharing_bytes,
    reduction_ratio,
    to_kb,
)
from .model import ARCH_PRESETS, embed, init_model, make_optimizer
from .numerics import RNG_ALGORITHM, derive_seed, make_rng
from .prototypes import PrototypeSet, StackedPrototypes, prototype_delta_frobenius
from .server import PADDING_MODES, ServerState, empirical_agg_lipschitz, init_prototypes, server_round

BASE_MODES = ("fedapa", "uniform_proto", "local_only", "fedapa_no_lc", "fedapa_static_lambda")
DIAG_LEVELS = ("none", "light", "full")
METRIC_COLUMNS = (
    "round", "client", "mode", "seed", "accuracy", "macro_f1", "mae",
    "ce", "lg", "lc", "lambda_t", "loss", "grad_norm_sq", "bytes_up", "bytes_down",
)  # fmt: skip

# Salts that keep the derived RNG streams of different purposes apart.
_SALT_INIT, _SALT_PROTO, _SALT_DIAG, _SALT_AGG = 1000, 7, 2000, 3000


class ConfigError(ValueError):
    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field_path = field_path


class RunIoError(OSError):
    pass


@dataclass
class ExperimentConfig:
    mode: str = "fedapa"
    static_lambda: float | None = None
    rounds: int = 200
    seed: int = 0
    out_dir: str = "runs/out"
    arch: tuple[str, ...] = ("large",)
    lr: float = 1e-2
    momentum: float = 0.5
    weight_decay: float = 1e-5
    batch_size: int = 16
    local_epochs: int = 1
    tau_agg: float = 0.5
    tau_loss: float = 0.5
    d_feat: int = 256
    lambda_min: float = 0.0
    lambda_max: float = 1.0
    T_warm: int = 50
    padding: str = "mean"
    exclude_self: bool = False
    workers: int = 1
    diagnostics: str = "light"
    diag_every: int = 10
    data_csv: str | None = None
    data: SynthSpec = field(default_factory=SynthSpec)

    @property
    def mode_label(self) -> str:
        if self.mode == "fedapa_static_lambda":
            return f"fedapa_static_lambda({self.static_lambda!r})"
        return self.mode

    def archs(self, num_clients: int) -> list[str]:
        if len(self.arch) == 1:
            return list(self.arch) * num_clients
        if len(self.arch) != num_clients:
            raise ConfigError("arch", f"expected 1 or {num_clients} entries, got {len(self.arch)}")
        return list(self.arch)

    def validate(self) -> None:
        if self.mode not in BASE_MODES:
            raise ConfigError("mode", f"unknown mode {self.mode!r}")
        if (self.mode == "fedapa_static_lambda") != (self.static_lambda is not None):
            raise ConfigError("mode", "a static coefficient goes with fedapa_static_lambda only")
        if self.rounds < 1:
            raise ConfigError("rounds", "must be >= 1")
        for a in self.arch:
            if a not in ARCH_PRESETS:
                raise ConfigError("arch", f"unknown preset {a!r}")
        if self.data_csv is None:
            self.archs(self.data.num_clients)
        for name in ("lr", "tau_agg", "tau_loss"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be > 0")
        for name in ("batch_size", "local_epochs", "d_feat", "T_warm", "workers", "diag_every"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("momentum" if self.momentum < 0 else "weight_decay", "must be >= 0")
        if self.lambda_min > self.lambda_max:
            raise ConfigError("lambda_min", "must not exceed lambda_max")
        if self.padding not in PADDING_MODES:
            raise ConfigError("padding", f"unknown padding {self.padding!r}")
        if self.diagnostics not in DIAG_LEVELS:
            raise ConfigError("diagnostics", f"expected one of {DIAG_LEVELS}")
        if self.data_csv is None:
            try:
                self.data.validate()
            except DataError as e:
                raise ConfigError("data", str(e)) from None


_TOP_KEYS = [f.name for f in fields(ExperimentConfig) if f.name not in ("static_lambda", "data", "data_csv")]
_DATA_KEYS = [f.name for f in fields(SynthSpec) if f.name != "seed"]
_MODE_RE = re.compile(r"^fedapa_static_lambda\((.+)\)$")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(v)
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for k in _TOP_KEYS:
        v = cfg.mode_label if k == "mode" else getattr(cfg, k)
        lines.append(f"{k} = {_fmt(v)}")
    lines.append(f"data.csv = {_fmt(cfg.data_csv)}")
    for k in _DATA_KEYS:
        lines.append(f"data.{k} = {_fmt(getattr(cfg.data, k))}")
    return "\n".join(lines) + "\n"


def _coerce(path: str, raw: str, like):
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise ConfigError(path, f"cannot parse {raw!r} as {type(like).__name__}") from None
    return raw


def parse_config(text: str) -> ExperimentConfig:
    """Parse the key-value format; the result is validated."""
    cfg = ExperimentConfig()
    data_kw = {}
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(key, "duplicate key")
        seen.add(key)
        if key == "mode":
            m = _MODE_RE.match(raw)
            if m:
                cfg.mode = "fedapa_static_lambda"
                cfg.static_lambda = _coerce("mode", m.group(1), 0.0)
            else:
                cfg.mode = raw
        elif key == "arch":
            cfg.arch = tuple(a.strip() for a in raw.split(",") if a.strip())
        elif key == "out_dir":
            cfg.out_dir = raw
        elif key == "data.csv":
            cfg.data_csv = raw or None
        elif key.startswith("data.") and key[5:] in _DATA_KEYS:
            data_kw[key[5:]] = _coerce(key, raw, getattr(cfg.data, key[5:]))
        elif key in _TOP_KEYS:
            setattr(cfg, key, _coerce(key, raw, getattr(cfg, key)))
        else:
            raise ConfigError(key, "unknown key")
    if data_kw:
        cfg.data = replace(cfg.data, **data_kw)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise RunIoError(f"cannot read config {path}: {e}") from None
    return parse_config(text)


# ---------------------------------------------------------------------------
# running


@dataclass
class _ModeSpec:
    server: str | None  # aggregation mode, None for no exchange
    use_Q: bool
    use_P: bool


_MODE_SPECS = {
    "fedapa": _ModeSpec("apa", True, True),
    "fedapa_static_lambda": _ModeSpec("apa", True, True),
    "fedapa_no_lc": _ModeSpec("apa", True, False),
    "uniform_proto": _ModeSpec("uniform", True, False),
    "local_only": _ModeSpec(None, False, False),
}


def build_datasets(cfg: ExperimentConfig) -> list[ClientDataset]:
    if cfg.data_csv is not None:
        return load_dataset_csv(cfg.data_csv, cfg.data.train_fraction, cfg.seed)
    return generate_synthetic(replace(cfg.data, seed=cfg.seed))


def build_clients(cfg: ExperimentConfig, datasets: list[ClientDataset]) -> list[ClientState]:
    N = len(datasets)
    C = max(int(max(d.y_train.max(), d.y_test.max(initial=0))) for d in datasets) + 1
    if cfg.data_csv is None:
        C = cfg.data.num_classes
    sched = WarmupSchedule(cfg.lambda_min, cfg.lambda_max, cfg.T_warm)
    clients = []
    for i, (ds, arch) in enumerate(zip(datasets, cfg.archs(N))):
        m = init_model(arch, ds.input_dim, C, make_rng(derive_seed(cfg.seed, _SALT_INIT + i)), cfg.d_feat)
        opt = make_optimizer(m, cfg.lr, cfg.momentum, cfg.weight_decay)
        clients.append(
            ClientState(
                i, m, opt, ds, sched, cfg.batch_size, cfg.local_epochs,
                cfg.tau_loss, cfg.seed, cfg.static_lambda,
            )  # fmt: skip
        )
    return clients


@dataclass
class _ClientResult:
    upload: PrototypeSet
    stats: RoundClientStats
    record: TraceRecord
    eval: tuple[float, float, float]


def _client_task(cfg, cs: ClientState, spec: _ModeSpec, t, Q, P, Q_prev, P_prev) -> _ClientResult:
    i = cs.client_id
    C = cs.num_classes
    ds = cs.dataset
    diag = cfg.diagnostics
    heavy = diag == "full" and (t % cfg.diag_every == 0 or t == 1)
    Qi = Q[i] if spec.use_Q else None
    Pm = P if spec.use_P else None
    rng = make_rng(derive_seed(cfg.seed, _SALT_DIAG + i, t))
    sigma_sq = smooth = c_phi = None
    if heavy:
        Qa = Qi.matrix(C) if Qi is not None else None
        Pa = Pm.tensor(C) if Pm is not None else None
        lam = cs.lambda_at(t)
        sigma_sq = variance_probe(cs.model, ds.X_train, ds.y_train, Qa, Pa, cs.tau, lam, cs.batch_size, rng)
        smooth = smoothness_probe(cs.model, ds.X_train, ds.y_train, Qa, Pa, cs.tau, lam, rng)
        if Qa is not None and Q_prev is not None:
            Pb = P_prev.tensor(C) if (Pa is not None and P_prev is not None) else None
            c_phi = regularizer_sensitivity(
                cs.model, ds.X_train, ds.y_train, Qa, Pa if Pb is not None else None, Q_prev[i].matrix(C), Pb, cs.tau
            )
    before = None
    if diag != "none":
        before = (cs.model.flat(encoder_only=True), _embed_train(cs))
    upload, stats = client_update(cs, Qi, Pm, t)
    lw = 0.0
    if before is not None:
        lw = encoder_lipschitz_probe(cs.model, ds.X_train, rng, trials=1, before=before)
    rec = TraceRecord(
        t=t,
        client=i,
        lambda_t=stats.lambda_t,
        steps=stats.steps,
        G_hat_sq=stats.grad_norm_sq_sum,
        start_loss=stats.start_loss.total,
        enc_grad_max=max(stats.enc_grad_norm),
        enc_step_max=max(stats.enc_step_norm),
        enc_displacement=stats.enc_displacement,
        local_classes=len(upload.local_classes),
        lw_ratio=lw,
        sigma_sq=sigma_sq,
        smoothness=smooth,
        c_phi=c_phi,
    )
    return _ClientResult(upload, stats, rec, evaluate(cs))


def _embed_train(cs: ClientState) -> np.ndarray:
    return embed(cs.model, cs.dataset.X_train)


@dataclass
class RunResult:
    out_dir: Path
    summary: dict
    trace: ConvergenceTrace
    metrics_rows: list[dict]


def _write_csv(path: Path, rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    path.write_text(buf.getvalue(), encoding="utf-8")


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> RunResult:
    """Run ``cfg.rounds`` federated rounds and write the run's artifacts.

    Artifacts in ``cfg.out_dir``: metrics.csv, trace.jsonl, rounds.jsonl,
    cost.json, summary.json, manifest.json. Client updates within a round run
    on ``cfg.workers`` threads; results are merged in client order, and each
    client only touches its own state, so the output does not depend on the
    worker count.
    """
    cfg.validate()
    spec = _MODE_SPECS[cfg.mode]
    datasets = build_datasets(cfg)
    clients = build_clients(cfg, datasets)
    N, C = len(clients), clients[0].num_classes
    P, Q = init_prototypes(N, C, cfg.d_feat, make_rng(derive_seed(cfg.seed, _SALT_PROTO)))
    srv = ServerState(C, cfg.tau_agg, spec.server or "apa", cfg.exclude_self, cfg.padding, 0, P, Q)
    cost = CostModel(cfg.d_feat, C, N)
    trace = ConvergenceTrace(lr=cfg.lr, T_warm=cfg.T_warm)
    rows, round_logs = [], []
    prev_upload: StackedPrototypes | None = None
    Q_prev = P_prev = None
    out = Path(cfg.out_dir)
    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None

    try:
        for t in range(1, cfg.rounds + 1):
            args = (spec, t, srv.Q, srv.P, Q_prev, P_prev)
            if pool is None:
                results = [_client_task(cfg, cs, *args) for cs in clients]
            else:
                futs = [pool.submit(_client_task, cfg, cs, *args) for cs in clients]
                results = [f.result() for f in futs]
            uploads = [r.upload for r in results]

            if spec.server is not None:
                Q_prev, P_prev = srv.Q, srv.P
                srv, log = server_round(srv, uploads)
                rb = fedapa_round_bytes(
                    cost,
                    [len(u.local_classes) for u in uploads],
                    [len(srv.Q[i].entries) for i in range(N)],
                    [len(s.entries) for s in srv.P.sets] if spec.use_P else None,
                )
                log.bytes_up, log.bytes_down = rb.up, rb.down
                round_logs.append(log.to_json())
            else:
                rb = None

            stack = StackedPrototypes(uploads, t)
            delta = prototype_delta_frobenius(stack, prev_upload) if prev_upload is not None else None
            prev_upload = stack
            L_agg = None
            if cfg.diagnostics != "none" and spec.server is not None and (t % cfg.diag_every == 0 or t == 1):
                L_agg = empirical_agg_lipschitz(
                    stack, 1e-3, 2, cfg.tau_agg, make_rng(derive_seed(cfg.seed, _SALT_AGG, t)), C, spec.server
                )
            for i, r in enumerate(results):
                r.record.delta_P = delta
                r.record.L_agg = L_agg
                trace.add(r.record)
                ml = r.stats.mean_loss
                acc, f1, err = r.eval
                rows.append(
                    {
                        "round": t, "client": i, "mode": cfg.mode_label, "seed": cfg.seed,
                        "accuracy": acc, "macro_f1": f1, "mae": err,
                        "ce": ml.ce, "lg": ml.lg, "lc": ml.lc, "lambda_t": ml.lambda_t, "loss": ml.total,
                        "grad_norm_sq": r.stats.grad_norm_sq_sum,
                        "bytes_up": rb.up[i] if rb else 0, "bytes_down": rb.down[i] if rb else 0,
                    }  # fmt: skip
                )
    finally:
        if pool is not None:
            pool.shutdown()

    summary = _summarize(cfg, rows, clients, cost)
    if write:
        try:
            out.mkdir(parents=True, exist_ok=True)
            _write_csv(out / "metrics.csv", rows)
            trace.write_jsonl(out / "trace.jsonl")
            with (out / "rounds.jsonl").open("w", encoding="utf-8") as fh:
                for lg in round_logs:
                    fh.write(json.dumps(lg, sort_keys=True) + "\n")
            _dump(out / "cost.json", summary.pop("_cost"))
            _dump(out / "summary.json", summary)
            _dump(
                out / "manifest.json",
                {
                    "config": serialize_config(cfg),
                    "version": __version__,
                    "rng": RNG_ALGORITHM,
                    "numpy": np.__version__,
                },
            )
        except OSError as e:
            raise RunIoError(f"cannot write artifacts to {out}: {e}") from None
    else:
        summary.pop("_cost")
    return RunResult(out, summary, trace, rows)


def _mode_theory_bytes(cfg: ExperimentConfig, cost: CostModel) -> int:
    spec = _MODE_SPECS[cfg.mode]
    if spec.server is None:
        return 0
    if spec.use_P:
        return complete_round_bytes(cost)
    return 2 * cost.num_classes * cost.prototype_bytes


def _summarize(cfg, rows, clients, cost) -> dict:
    T = cfg.rounds
    per_round = {}
    for r in rows:
        per_round.setdefault(r["round"], []).append(r)
    def series(key):
        return [float(np.mean([r[key] for r in per_round[t]])) for t in range(1, T + 1)]
    measured = [r["bytes_up"] + r["bytes_down"] for r in rows]
    theory = _mode_theory_bytes(cfg, cost)
    ref = REFERENCE_ARCHITECTURES["LargeConvNet4"]
    ref_bytes = model_sharing_bytes(ref[0])
    cost_doc = {
        "bytes_per_value": cost.bytes_per_param,
        "kilobyte": cost.kilobyte,
        "per_client_round_bytes_complete": theory,
        "per_client_round_kb_complete": to_kb(theory),
        "measured_mean_per_client_round_bytes": float(np.mean(measured)),
        "measured_total_bytes": int(sum(measured)),
        "model_sharing_reference": {
            name: {"params": p, "bytes": model_sharing_bytes(p)} for name, (p, _) in REFERENCE_ARCHITECTURES.items()
        },
        "reduction_vs_LargeConvNet4": reduction_ratio(theory, ref_bytes) if theory else 1.0,
        "client_models": [
            {"client": cs.client_id, "arch": cs.model.arch, "params": cs.model.num_params(),
             "sharing_bytes": model_sharing_bytes(cs.model.num_params())}
            for cs in clients
        ],  # fmt: skip
    }
    return {
        "mode": cfg.mode_label,
        "seed": cfg.seed,
        "rounds": T,
        "accuracy": last_rounds_mean(series("accuracy")),
        "macro_f1": last_rounds_mean(series("macro_f1")),
        "mae": last_rounds_mean(series("mae")),
        "kb_per_client_round": to_kb(theory),
        "kb_measured": to_kb(cost_doc["measured_mean_per_client_round_bytes"]),
        "_cost": cost_doc,
    }


# ---------------------------------------------------------------------------
# summary table


def _load_summary(path: str | Path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "summary.json"
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except OSError:
        raise RunIoError(f"cannot read {p}") from None


def print_summary(artifacts, file=None) -> str:
    """Format one row per mode (seeds averaged) from run directories or
    summary.json paths. Accuracy and F1 are percentages; KB is per client per
    round with complete prototype sets. Prints to ``file`` if given."""
    by_mode: dict[str, list[dict]] = {}
    for a in artifacts:
        s = _load_summary(a)
        by_mode.setdefault(s["mode"], []).append(s)
    header = f"{'Mode':<30} {'Seeds':>5} {'Accuracy':>9} {'F1':>7} {'MAE':>7} {'KB':>9}"
    lines = [header, "-" * len(header)]
    for mode, ss in by_mode.items():
        acc = 100 * np.mean([s["accuracy"] for s in ss])
        f1 = 100 * np.mean([s["macro_f1"] for s in ss])
        err = np.mean([s["mae"] for s in ss])
        kb = ss[0]["kb_per_client_round"]
        lines.append(f"{mode:<30} {len(ss):>5} {acc:>9.2f} {f1:>7.2f} {err:>7.3f} {kb:>9.2f}")
    text = "\n".join(lines)
    if file is not None:
        print(text, file=file)
    return text


def format_kb(nbytes: int) -> str:
    return f"{to_kb(nbytes):.2f} KB"


__all__ = [
    "ConfigError", "ExperimentConfig", "RunIoError", "RunResult", "METRIC_COLUMNS",
    "build_clients", "build_datasets", "format_kb", "load_config", "parse_config",
    "print_summary", "run_experiment", "serialize_config",
]  # fmt: skip
