"""Round loop of the decentralized federated simulation and its reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import aggregators as agg
from .attacks import (DATA_ATTACKS, AttackConfig, GanConfig, backdoor_poison,
                      craft_untargeted_krum, craft_untargeted_med,
                      default_trigger_threshold, gan_poison, label_flip, weight_scale)
from .datahub import (Dataset, PartitionPlan, load_csv, partition, split_train_test,
                      standardize, synth_generate)
from .defense import DEFAULT_MIN_GAP, DEFAULT_MIN_SEPARATION, AEConfig, run_pentidef
from .ledger import Ledger
from .neuralcore import (LayerSpec, ModelWeights, TrainConfig, deserialize_weights,
                         evaluate, init_network, serialize_weights, train_local)
from .privacy import (DEFAULT_SIGMA_BOUNDS, PrivacyBudget, clip_update, gaussian_sigma,
                      perturb, sample_noise_level)

DEFENSES = ("none", "pentidef", "fedcc", "flare", "krum", "median")
MAX_ADVERSARY_FRACTION = 0.5


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    path: str | None = None
    label_column: str = "label"
    n_samples: int = 20000
    n_features: int = 20
    separation: float = 3.0
    class_ratio: float = 0.5
    test_fraction: float = 0.3
    standardize: bool = True


@dataclass(frozen=True)
class DDPConfig:
    enabled: bool = False
    sigma_low: float = DEFAULT_SIGMA_BOUNDS[0]
    sigma_high: float = DEFAULT_SIGMA_BOUNDS[1]
    clip_norm: float = 1.0
    epsilon: float = 1.0
    delta: float = 1e-5


@dataclass(frozen=True)
class SimulationConfig:
    n_clients: int = 20
    rounds: int = 10
    adversary_fraction: float = 0.0
    defense: str = "pentidef"
    seed: int = 0
    hidden: tuple[int, ...] = (32, 16)
    partition: str = "iid"
    alpha: float = 0.5
    cka_variant: str = "frobenius"
    split_min_gap: float = DEFAULT_MIN_GAP
    split_min_separation: float = DEFAULT_MIN_SEPARATION
    krum_f: int | None = None
    flare_probe: int = 64
    flare_k: int | None = None
    n_jobs: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    ddp: DDPConfig = field(default_factory=DDPConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        learning_rate=0.1, epochs=5, batch_size=64, optimizer="sgd"))
    autoencoder: AEConfig = field(default_factory=AEConfig)

    @property
    def n_adversaries(self) -> int:
        return int(round(self.adversary_fraction * self.n_clients))

    def adversaries(self) -> tuple[int, ...]:
        # the last clients are the adversaries
        return tuple(range(self.n_clients - self.n_adversaries, self.n_clients))

    def validate(self) -> "SimulationConfig":
        if self.n_clients < 2:
            raise ConfigError("n_clients must be >= 2")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if not 0.0 <= self.adversary_fraction < MAX_ADVERSARY_FRACTION:
            raise ConfigError(
                f"adversary_fraction {self.adversary_fraction} violates the threat model: "
                f"adversaries must be fewer than {MAX_ADVERSARY_FRACTION:.0%} of clients")
        if self.defense not in DEFENSES:
            raise ConfigError(f"defense must be one of {DEFENSES}, got {self.defense!r}")
        if self.defense == "krum":
            f = self.krum_f_effective
            if self.n_clients < 2 * f + 3:
                raise ConfigError(f"krum needs n_clients >= 2f + 3 (n={self.n_clients}, f={f})")
        if self.attack.kind == "un_krum" and self.n_adversaries and self.n_adversaries < 1:
            raise ConfigError("un_krum needs at least one adversary")
        if self.data.source not in ("synthetic", "csv"):
            raise ConfigError("data.source must be 'synthetic' or 'csv'")
        if self.data.source == "csv" and not self.data.path:
            raise ConfigError("data.path is required for csv data")
        if not 0 <= self.ddp.sigma_low <= self.ddp.sigma_high:
            raise ConfigError("ddp sigma bounds must satisfy 0 <= low <= high")
        if self.cka_variant not in ("frobenius", "trace"):
            raise ConfigError(f"cka_variant must be 'frobenius' or 'trace', got {self.cka_variant!r}")
        if self.split_min_gap < 0 or self.split_min_separation < 0:
            raise ConfigError("split_min_gap and split_min_separation must be >= 0")
        if self.n_jobs < 1:
            raise ConfigError("n_jobs must be >= 1")
        if len(self.hidden) < 2:
            raise ConfigError("hidden needs at least 2 layers")
        return self

    @property
    def krum_f_effective(self) -> int:
        return self.krum_f if self.krum_f is not None else max(1, self.n_adversaries)

    def as_dict(self) -> dict:
        return _jsonable(asdict(self))


_NESTED = {"data": DataConfig, "attack": AttackConfig, "ddp": DDPConfig,
           "train": TrainConfig, "autoencoder": AEConfig}


def config_from_dict(d: dict) -> SimulationConfig:
    d = dict(d)
    known = {f.name for f in fields(SimulationConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in d.items():
        if key in _NESTED:
            cls = _NESTED[key]
            value = dict(value)
            sub_known = {f.name for f in fields(cls)}
            bad = set(value) - sub_known
            if bad:
                raise ConfigError(f"unknown keys in [{key}]: {sorted(bad)}")
            if key == "attack" and "gan" in value:
                value["gan"] = GanConfig(**value["gan"])
            try:
                value = cls(**value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{key}]: {exc}") from None
        elif key == "hidden":
            value = tuple(int(v) for v in value)
        kwargs[key] = value
    try:
        cfg = SimulationConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


def load_config(path) -> SimulationConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix == ".json":
        raw = json.loads(text)
    else:
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw)


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

@dataclass
class RoundRecord:
    round: int
    metrics: dict
    scores: list | None = None
    benign: list | None = None
    poisoned: list | None = None
    sigmas: list | None = None
    max_index: int | None = None
    detection: dict | None = None
    global_hash: str = ""


@dataclass
class SimulationReport:
    config: dict
    adversaries: list
    rounds: list
    final_metrics: dict
    detection: dict | None
    ledger_records: int
    ledger_head: str
    final_model_hash: str
    chain_valid: bool
    implied_sigma: float | None = None
    wall_clock: float = 0.0
    # in-memory only; the serialized report carries final_model_hash instead
    final_model: ModelWeights | None = field(default=None, repr=False, compare=False)

    def as_dict(self, include_timing: bool = False) -> dict:
        d = _jsonable({f.name: getattr(self, f.name) for f in fields(self) if f.name != "final_model"})
        # execution settings are not part of the experiment's outcome
        d["config"].pop("n_jobs", None)
        if not include_timing:
            d.pop("wall_clock")
        return d


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def detection_scores(poisoned, adversaries) -> dict:
    poisoned, adversaries = set(poisoned), set(adversaries)
    tp = len(poisoned & adversaries)
    p = tp / len(poisoned) if poisoned else (1.0 if not adversaries else 0.0)
    r = tp / len(adversaries) if adversaries else 1.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return {"tp": tp, "fp": len(poisoned - adversaries), "fn": len(adversaries - poisoned),
            "precision": p, "recall": r, "f1": f1}


def emit_report(report: SimulationReport, path, fmt: str = "json", include_timing: bool = False) -> Path:
    path = Path(path)
    path.write_bytes(report_bytes(report, fmt, include_timing))
    return path


def report_bytes(report: SimulationReport, fmt: str = "json", include_timing: bool = False) -> bytes:
    if fmt == "json":
        return (json.dumps(report.as_dict(include_timing), indent=2, sort_keys=True) + "\n").encode()
    if fmt == "csv":
        return _report_csv(report).encode()
    raise ValueError(f"unknown report format {fmt!r}")


def _report_csv(report: SimulationReport) -> str:
    n = report.config["n_clients"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "accuracy", "precision", "recall", "f1", "max_index", "n_poisoned",
                "detection_f1"] + [f"cka_{i}" for i in range(n)] + [f"sigma_{i}" for i in range(n)])
    for r in report.rounds:
        scores = r["scores"] or [""] * n
        sigmas = r["sigmas"] or [""] * n
        m = r["metrics"]
        w.writerow([r["round"], repr(m["accuracy"]), repr(m["precision"]), repr(m["recall"]),
                    repr(m["f1"]), "" if r["max_index"] is None else r["max_index"],
                    "" if r["poisoned"] is None else len(r["poisoned"]),
                    "" if r["detection"] is None else repr(r["detection"]["f1"])]
                   + [s if s == "" else repr(s) for s in scores]
                   + [s if s == "" else repr(s) for s in sigmas])
    return buf.getvalue()


def report_from_json(data) -> dict:
    return json.loads(data)


# --------------------------------------------------------------------------
# seeds and data
# --------------------------------------------------------------------------

def sub_seed(master: int, *parts) -> int:
    """Stable 63-bit seed for a (purpose, round, client, ...) tuple."""
    text = ":".join(str(p) for p in (master, *parts))
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


def prepare_data(cfg: SimulationConfig):
    dc = cfg.data
    if dc.source == "csv":
        data = load_csv(dc.path, dc.label_column)
    else:
        data = synth_generate(dc.n_samples, dc.n_features, dc.separation, dc.class_ratio,
                              sub_seed(cfg.seed, "data"))
    train, test = split_train_test(data, dc.test_fraction, sub_seed(cfg.seed, "split"))
    if dc.standardize:
        train, test = standardize(train, test)
    plan = PartitionPlan("dirichlet" if cfg.partition == "dirichlet" else "iid",
                         cfg.n_clients, sub_seed(cfg.seed, "partition"), cfg.alpha)
    return partition(train, plan), test


def _poison_data(cfg: SimulationConfig, data: Dataset, client: int) -> Dataset:
    a = cfg.attack
    if a.kind == "label_flip":
        return label_flip(data)
    if a.kind == "backdoor":
        tau = a.trigger_threshold if a.trigger_threshold is not None else default_trigger_threshold(data)
        return backdoor_poison(data, tau, a.target_label)
    if a.kind == "gan":
        return gan_poison(data, a.gan, sub_seed(cfg.seed, "gan", client))
    return data


# --------------------------------------------------------------------------
# the round loop
# --------------------------------------------------------------------------

def _delta(w: ModelWeights, g: ModelWeights) -> ModelWeights:
    return ModelWeights.from_flat(w.spec, w.flat() - g.flat())


def _aggregate(cfg, global_w, updates, probe, round_seed):
    """Apply the configured rule; returns (W', scores, verdict or None, selected)."""
    n = len(updates)
    if cfg.defense in ("pentidef", "fedcc"):
        res = run_pentidef(global_w, updates, cfg.autoencoder, round_seed, cfg.cka_variant,
                           use_autoencoder=cfg.defense == "pentidef",
                           min_gap=cfg.split_min_gap, min_separation=cfg.split_min_separation)
        return res.aggregate, res.scores, res.verdict, res.max_index
    if cfg.defense == "flare":
        res = agg.flare_aggregate(updates, probe, cfg.flare_k)
        return res.aggregate, res.trust, None, int(np.argmax(res.trust))
    if cfg.defense == "krum":
        idx = agg.krum_index(updates, cfg.krum_f_effective)
        return updates[idx].copy(), None, None, idx
    if cfg.defense == "median":
        return agg.coord_median(updates), None, None, 0
    return agg.fed_avg(updates), None, None, 0


def run_simulation(cfg: SimulationConfig, progress=None) -> SimulationReport:
    """Run ``cfg.rounds`` rounds and return the report.

    Per round: clients fetch the global model from the blob store, train
    (adversaries poison data before or weights after training), clip and
    perturb when DDP is on, and sign their records; the defense filters the
    updates; the aggregate is stored and recorded by the selected client, then
    evaluated on the test split.
    """
    cfg.validate()
    t_start = time.perf_counter()
    shards, test = prepare_data(cfg)
    adversaries = set(cfg.adversaries())
    local_data = [(_poison_data(cfg, d, i) if i in adversaries and cfg.attack.kind in DATA_ATTACKS else d)
                  for i, d in enumerate(shards)]
    spec = LayerSpec((test.n_features, *cfg.hidden, 1))
    probe = test.subset(np.arange(min(cfg.flare_probe, len(test))))

    ledger = Ledger(seed=cfg.seed, sigma_bounds=(cfg.ddp.sigma_low, cfg.ddp.sigma_high))
    ids = [ledger.register_identity(f"client-{i:02d}") for i in range(cfg.n_clients)]
    global_w = init_network(spec, sub_seed(cfg.seed, "init"))
    global_hash = ledger.store_blob(serialize_weights(global_w))

    rounds = [RoundRecord(0, evaluate(global_w, test).as_dict(), global_hash=global_hash)]
    implied = None
    if cfg.ddp.enabled:
        implied = gaussian_sigma(PrivacyBudget(cfg.ddp.epsilon, cfg.ddp.delta, cfg.ddp.clip_norm,
                                               cfg.ddp.clip_norm))
    det_totals = {"tp": 0, "fp": 0, "fn": 0}

    def client_phase(i, g, t):
        w = train_local(g, local_data[i], replace(cfg.train, seed=sub_seed(cfg.seed, "train", t, i)))
        if i in adversaries and cfg.attack.kind == "weight_scale":
            w = weight_scale(w, cfg.attack.scale)
        return w

    pool = ThreadPoolExecutor(max_workers=cfg.n_jobs) if cfg.n_jobs > 1 else None
    try:
        for t in range(1, cfg.rounds + 1):
            ledger.begin_round(t)
            g = deserialize_weights(ledger.fetch_blob(global_hash))
            if pool is not None:
                local = list(pool.map(lambda i: client_phase(i, g, t), range(cfg.n_clients)))
            else:
                local = [client_phase(i, g, t) for i in range(cfg.n_clients)]
            local = _apply_collusion(cfg, local, g, adversaries)

            uploads, sigmas = [], []
            for i, w in enumerate(local):
                sigma = 0.0
                if cfg.ddp.enabled:
                    # model-poisoning adversaries skip the honest clipping step
                    if not (i in adversaries and cfg.attack.kind not in DATA_ATTACKS):
                        w = ModelWeights.from_flat(
                            w.spec, g.flat() + clip_update(_delta(w, g), cfg.ddp.clip_norm).flat())
                    sigma = sample_noise_level(sub_seed(cfg.seed, "sigma", t, i),
                                               (cfg.ddp.sigma_low, cfg.ddp.sigma_high))
                    w = perturb(w, sigma, sub_seed(cfg.seed, "noise", t, i), ids[i].client_id, t).weights
                uploads.append(w)
                sigmas.append(sigma)

            # chaincode reads the submitted weights back from storage
            hashes = [ledger.store_blob(serialize_weights(w)) for w in uploads]
            fetched = [deserialize_weights(ledger.fetch_blob(h)) for h in hashes]
            new_w, scores, verdict, selected = _aggregate(cfg, g, fetched, probe,
                                                          sub_seed(cfg.seed, "ae", t))
            benign_set = set(verdict.benign) if verdict is not None else set(range(cfg.n_clients))
            for i in range(cfg.n_clients):
                ledger.submit_model(ledger.make_record(
                    ids[i], hashes[i], sigma=sigmas[i],
                    epsilon=cfg.ddp.epsilon if cfg.ddp.enabled else None,
                    delta=cfg.ddp.delta if cfg.ddp.enabled else None,
                    trust_score=None if scores is None else float(scores[i]),
                    adversary=i in adversaries, benign_verdict=i in benign_set))

            global_hash = ledger.store_blob(serialize_weights(new_w))
            ledger.submit_model(ledger.make_record(
                ids[selected], global_hash, kind="global", selected=True,
                trust_score=None if scores is None else float(scores[selected]),
                adversary=selected in adversaries, benign_verdict=selected in benign_set))
            ledger.seal_block()
            global_w = new_w

            det = None
            if verdict is not None:
                det = detection_scores(verdict.poisoned, adversaries)
                for k in det_totals:
                    det_totals[k] += det[k]
            rounds.append(RoundRecord(
                t, evaluate(global_w, test).as_dict(),
                scores=None if scores is None else [float(s) for s in scores],
                benign=None if verdict is None else list(verdict.benign),
                poisoned=None if verdict is None else list(verdict.poisoned),
                sigmas=sigmas, max_index=int(selected), detection=det, global_hash=global_hash))
            if progress is not None:
                progress(rounds[-1])
    finally:
        if pool is not None:
            pool.shutdown()

    detection = None
    if cfg.defense in ("pentidef", "fedcc"):
        tp, fp, fn = det_totals["tp"], det_totals["fp"], det_totals["fn"]
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        detection = {**det_totals, "precision": p, "recall": r,
                     "f1": 2 * p * r / (p + r) if p + r else 0.0}
    return SimulationReport(
        config=cfg.as_dict(),
        adversaries=sorted(adversaries),
        rounds=[asdict(r) for r in rounds],
        final_metrics=rounds[-1].metrics,
        detection=detection,
        ledger_records=len(ledger),
        ledger_head=ledger.head_digest(),
        final_model_hash=global_hash,
        chain_valid=ledger.verify_chain(),
        implied_sigma=implied,
        wall_clock=time.perf_counter() - t_start,
        final_model=global_w,
    )


def _apply_collusion(cfg, local, g, adversaries):
    """Un-Krum / Un-Med adversaries share their honest models and send one crafted model."""
    kind = cfg.attack.kind
    if kind not in ("un_krum", "un_med") or not adversaries:
        return local
    estimates = [local[i] for i in sorted(adversaries)]
    if kind == "un_krum":
        crafted = craft_untargeted_krum(estimates, g, len(adversaries), cfg.attack.margin,
                                        cfg.attack.eps_floor)
    else:
        crafted = craft_untargeted_med(estimates, g, cfg.attack.margin, cfg.attack.eps_floor)
    return [crafted.copy() if i in adversaries else w for i, w in enumerate(local)]
