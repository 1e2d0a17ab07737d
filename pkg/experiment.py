"""
Experiment configuration files.

A config file (TOML or YAML, picked by extension) declares one experiment:

    [dataset]              kind = "blobs" | "csv" | "quadratic" and its parameters
    [dataset.partition]    N, C, seed                      (blobs / csv)
    [dataset.server]       kind = "iid" | "clients" | "shifted" | "none"
    [dataset.test]         per_class / fraction / path, seed
    [model]                kind = "softmax" | "mlp" | "quadratic", hidden
    [federation]           algorithms plus FederationConfig fields
    [run]                  seeds, out, metrics_stride, rolling_window, jobs, db
    [theory]               optional L, G, xi_bar, sigma, sigma0, d0_tilde

Federation keys accept the short protocol names N, S, K, K0, B, B0, T.  Local
step counts may be given directly or through epochs:
K = ceil(E_c * n_i / B), E_s = ceil(n / (N n0) * E_c), K0 = ceil(E_s * n0 / B0).
``gamma`` is a number, a list (a sweep) or "ds-matched" (gamma = N n0 / n).
"""

from __future__ import annotations

import logging
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import yaml

from config import Algorithm, ConfigError, FederationConfig, PartitionError
from datasets import (
    FederatedData, FromClients, IidSubsample, LabeledDataset, PartitionSpec,
    ServerDataSpec, Shifted, build_server_data, gen_blobs, partition_by_class,
    quadratic_testbed, train_test_split,
)
from loss_models import ModelLike, build_model, quadratic_party_models
from theory import TheoryConstants, exact_constants_for_quadratics

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SHORT_KEYS = {
    "N": "num_clients", "S": "clients_per_round", "K": "local_steps",
    "K0": "server_steps", "B": "batch_size", "B0": "server_batch_size",
    "T": "rounds",
}

DEFAULT_WINDOW = 20
DEFAULT_ETA_L = 0.05
DEFAULT_ROUNDS = 100
DEFAULT_BATCH = 20
QUADRATIC_STRIDE = 1
NEURAL_STRIDE = 10


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------

@dataclass
class DatasetBlock:
    kind: str
    params: Dict[str, Any]
    partition: Dict[str, Any] = field(default_factory=dict)
    server: Dict[str, Any] = field(default_factory=dict)
    test: Dict[str, Any] = field(default_factory=dict)


@dataclass
class ExperimentSpec:
    """
    One fully validated experiment.

    ``federation`` holds FederationConfig fields shared by every run; the
    algorithm, gamma and master seed vary per run (see ``runs``).
    """

    name: str
    dataset: DatasetBlock
    model_kind: str
    hidden: int
    algorithms: List[Algorithm]
    federation: Dict[str, Any]
    gammas: List[float]
    seeds: List[int]
    out_dir: Path
    metrics_stride: int = 1
    rolling_window: int = DEFAULT_WINDOW
    jobs: int = 1
    db_path: Optional[Path] = None
    theory: Optional[Dict[str, float]] = None
    source: Optional[Path] = None

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ConfigError("seeds", "at least one seed is required")
        if not self.algorithms:
            raise ConfigError("algorithms", "at least one algorithm is required")
        if self.jobs < 1:
            raise ConfigError("jobs", f"must be >= 1, got {self.jobs}")

    # ------------------------------------------------------------------ #
    # Run expansion                                                      #
    # ------------------------------------------------------------------ #

    def runs(self) -> List[Tuple[Algorithm, float, int]]:
        """(algorithm, gamma, seed) for every run; gamma is 0 without server learning."""
        out = []
        for algo in self.algorithms:
            gammas = self.gammas if algo.has_server_learning else [0.0]
            for gamma in gammas:
                for seed in self.seeds:
                    out.append((algo, gamma, seed))
        return out

    def federation_config(self, algorithm: Algorithm, gamma: float, seed: int) -> FederationConfig:
        values = dict(self.federation)
        values.update(
            algorithm=algorithm,
            gamma=gamma,
            master_seed=seed,
            metrics_stride=self.metrics_stride,
            rolling_window=self.rolling_window,
        )
        return FederationConfig.from_dict(values)

    def theory_constants(self) -> Optional[TheoryConstants]:
        """Constants for bound evaluation: exact on the quadratic testbed, else from [theory]."""
        if self.dataset.kind == "quadratic":
            p = self.dataset.params
            return exact_constants_for_quadratics(p["client_centers"], p["server_center"])
        if not self.theory:
            return None
        known = {"L", "G", "xi_bar", "sigma", "sigma0"}
        return TheoryConstants(**{k: float(v) for k, v in self.theory.items() if k in known},
                               N=self.federation["num_clients"],
                               S=self.federation["clients_per_round"])

    # ------------------------------------------------------------------ #
    # Construction                                                       #
    # ------------------------------------------------------------------ #

    def build_data(self) -> FederatedData:
        return build_federated_data(self.dataset, self.federation["num_clients"])

    def build_model(self, data: FederatedData) -> ModelLike:
        """One shared classifier, or a center per party on the quadratic testbed."""
        if self.dataset.kind == "quadratic":
            p = self.dataset.params
            return quadratic_party_models(p["client_centers"], p["server_center"])
        sample = data.clients[0]
        return build_model(self.model_kind, sample.dim, sample.num_classes, self.hidden)

    def with_overrides(self, seed: Optional[int] = None, out: Optional[PathLike] = None) -> "ExperimentSpec":
        if seed is not None:
            self.seeds = [int(seed)]
        if out is not None:
            self.out_dir = Path(out)
        return self

    def summary(self) -> str:
        algos = ",".join(a.value for a in self.algorithms)
        gammas = ",".join(f"{g:g}" for g in self.gammas)
        return (f"{self.name}: {self.dataset.kind}/{self.model_kind} algos=[{algos}] "
                f"gamma=[{gammas}] seeds={self.seeds} -> {self.out_dir}")


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def load_document(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("path", f"config file {path} does not exist")
    suffix = path.suffix.lower()
    try:
        if suffix == ".toml":
            with path.open("rb") as fh:
                doc = tomllib.load(fh)
        elif suffix in (".yaml", ".yml"):
            with path.open(encoding="utf-8") as fh:
                doc = yaml.safe_load(fh) or {}
        else:
            raise ConfigError("path", f"unsupported config format {suffix!r} (use .toml or .yaml)")
    except (tomllib.TOMLDecodeError, yaml.YAMLError) as exc:
        raise ConfigError("path", f"malformed config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("path", "config root must be a table")
    return doc


def parse_config(path: PathLike) -> ExperimentSpec:
    """Read, validate and default-fill an experiment config."""
    path = Path(path)
    doc = load_document(path)
    spec = parse_document(doc, base_dir=path.parent)
    spec.source = path
    logger.info("parsed %s", spec.summary())
    return spec


def parse_document(doc: Dict[str, Any], base_dir: Path = Path(".")) -> ExperimentSpec:
    _reject_unknown("", doc, {"name", "dataset", "model", "federation", "run", "theory"})
    if "dataset" not in doc:
        raise ConfigError("dataset", "missing section")

    dataset = _parse_dataset(_section(doc, "dataset"), base_dir)
    model = _section(doc, "model", required=False)
    _reject_unknown("model", model, {"kind", "hidden"})
    default_model = "quadratic" if dataset.kind == "quadratic" else "softmax"
    model_kind = str(model.get("kind", default_model)).lower()
    hidden = _as_int("model.hidden", model.get("hidden", 16), minimum=1)
    if dataset.kind == "quadratic" and model_kind not in ("quadratic", "quadratic_consensus"):
        raise ConfigError("model.kind", "the quadratic dataset needs the quadratic model")

    run = _section(doc, "run", required=False)
    _reject_unknown("run", run, {"seeds", "out", "metrics_stride", "rolling_window", "jobs", "db"})
    seeds = run.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    seeds = [_as_int("seeds", s, minimum=0) for s in seeds]
    neural = model_kind not in ("quadratic", "quadratic_consensus")
    stride = _as_int("metrics_stride", run.get("metrics_stride",
                                               NEURAL_STRIDE if neural else QUADRATIC_STRIDE), 1)
    window = _as_int("rolling_window", run.get("rolling_window", DEFAULT_WINDOW), 1)
    out_dir = Path(run.get("out", "results"))
    db = run.get("db")

    fed_doc = dict(_section(doc, "federation"))
    algorithms = fed_doc.pop("algorithms", fed_doc.pop("algorithm", None))
    if algorithms is None:
        raise ConfigError("algorithms", "missing")
    if isinstance(algorithms, str):
        algorithms = [algorithms]
    algos = [Algorithm.parse(a) for a in algorithms]
    federation, gamma_value = _parse_federation(fed_doc, dataset)
    gammas = _resolve_gammas(gamma_value, dataset, federation["num_clients"])

    theory = doc.get("theory")
    if theory is not None:
        _reject_unknown("theory", theory, {"L", "G", "xi_bar", "sigma", "sigma0", "d0_tilde"})

    spec = ExperimentSpec(
        name=str(doc.get("name", "experiment")),
        dataset=dataset,
        model_kind=model_kind,
        hidden=hidden,
        algorithms=algos,
        federation=federation,
        gammas=gammas,
        seeds=seeds,
        out_dir=out_dir,
        metrics_stride=stride,
        rolling_window=window,
        jobs=_as_int("jobs", run.get("jobs", 1), minimum=1),
        db_path=Path(db) if db else None,
        theory=dict(theory) if theory else None,
    )
    # validate every run's config up front so errors surface before any work
    for algo, gamma, seed in spec.runs():
        spec.federation_config(algo, gamma, seed)
    return spec


# ---------------------------------------------------------------------------
# Sections
# ---------------------------------------------------------------------------

_DATASET_KEYS = {
    "blobs": {"kind", "num_classes", "per_class", "dim", "spread", "radius", "seed"},
    "csv": {"kind", "path", "num_classes"},
    "quadratic": {"kind", "client_centers", "server_center", "samples_per_party"},
}


def _parse_dataset(doc: Dict[str, Any], base_dir: Path) -> DatasetBlock:
    doc = dict(doc)
    kind = str(doc.get("kind", "blobs")).lower()
    if kind not in _DATASET_KEYS:
        raise ConfigError("dataset.kind", f"unknown dataset kind {kind!r}")
    partition = doc.pop("partition", {})
    server = doc.pop("server", {})
    test = doc.pop("test", {})
    _reject_unknown("dataset", doc, _DATASET_KEYS[kind])

    params = {k: v for k, v in doc.items() if k != "kind"}
    if kind == "blobs":
        for key in ("num_classes", "per_class", "dim"):
            if key not in params:
                raise ConfigError(f"dataset.{key}", "missing")
            params[key] = _as_int(f"dataset.{key}", params[key], minimum=1)
        params["spread"] = _as_float("dataset.spread", params.get("spread", 1.0))
        params["radius"] = _as_float("dataset.radius", params.get("radius", 1.0))
        params["seed"] = _as_int("dataset.seed", params.get("seed", 0), minimum=0)
    elif kind == "csv":
        if "path" not in params:
            raise ConfigError("dataset.path", "missing")
        params["path"] = _existing(base_dir, params["path"], "dataset.path")
    else:
        if "client_centers" not in params or "server_center" not in params:
            raise ConfigError("dataset.client_centers", "quadratic datasets need client_centers and server_center")
        centers = np.asarray(params["client_centers"], dtype=np.float64)
        if centers.ndim != 2 or centers.shape[0] < 1:
            raise ConfigError("dataset.client_centers", "must be a non-empty list of vectors")
        if np.asarray(params["server_center"]).shape != (centers.shape[1],):
            raise ConfigError("dataset.server_center", "dimension differs from the client centers")
        params["samples_per_party"] = _as_int("dataset.samples_per_party",
                                              params.get("samples_per_party", 8), 1)

    _reject_unknown("dataset.partition", partition, {"N", "C", "seed"})
    _reject_unknown("dataset.server", server,
                    {"kind", "n0", "num_clients", "samples_per_client", "shift", "drop_classes", "seed"})
    _reject_unknown("dataset.test", test, {"per_class", "fraction", "path", "seed"})
    if "path" in test:
        test = dict(test, path=_existing(base_dir, test["path"], "dataset.test.path"))
    return DatasetBlock(kind, params, dict(partition), dict(server), dict(test))


def _parse_federation(doc: Dict[str, Any], dataset: DatasetBlock) -> Tuple[Dict[str, Any], Any]:
    fed: Dict[str, Any] = {}
    for key, value in doc.items():
        fed[SHORT_KEYS.get(key, key)] = value

    gamma = fed.pop("gamma", 1.0)
    client_epochs = fed.pop("client_epochs", None)
    server_epochs = fed.pop("server_epochs", None)

    if dataset.kind == "quadratic":
        n_clients = len(dataset.params["client_centers"])
        if fed.setdefault("num_clients", n_clients) != n_clients:
            raise ConfigError("N", f"quadratic dataset defines {n_clients} clients")
    elif "num_clients" not in fed:
        fed["num_clients"] = dataset.partition.get("N", 1)
    N = _as_int("N", fed["num_clients"], minimum=1)
    fed["num_clients"] = N
    S = _as_int("S", fed.setdefault("clients_per_round", N), minimum=1)
    if S > N:
        raise ConfigError("S", f"clients_per_round ({S}) exceeds N ({N})")

    n = _train_size(dataset)
    n_i = n // N
    n0 = _server_size(dataset)

    fed.setdefault("eta_l", DEFAULT_ETA_L)
    fed.setdefault("rounds", DEFAULT_ROUNDS)
    fed.setdefault("batch_size", max(1, min(DEFAULT_BATCH, n_i)))
    B = _as_int("B", fed["batch_size"], minimum=1)
    B0 = _as_int("B0", fed.get("server_batch_size") or B, minimum=1)

    if "local_steps" not in fed:
        E_c = _as_float("client_epochs", client_epochs if client_epochs is not None else 1.0)
        fed["local_steps"] = max(1, math.ceil(E_c * n_i / B))
    if "server_steps" not in fed:
        if n0 == 0:
            fed["server_steps"] = fed["local_steps"]
        else:
            if server_epochs is None:
                E_c = _as_float("client_epochs", client_epochs if client_epochs is not None else 1.0)
                server_epochs = math.ceil(n / (N * n0) * E_c)
            E_s = _as_float("server_epochs", server_epochs)
            fed["server_steps"] = max(1, math.ceil(E_s * n0 / B0))
    return fed, gamma


def _resolve_gammas(value: Any, dataset: DatasetBlock, N: int) -> List[float]:
    items = value if isinstance(value, list) else [value]
    if not items:
        raise ConfigError("gamma", "empty gamma list")
    gammas = []
    for item in items:
        if isinstance(item, str) and item.strip().lower() == "ds-matched":
            n, n0 = _train_size(dataset), _server_size(dataset)
            gammas.append(N * n0 / n)
        else:
            g = _as_float("gamma", item)
            gammas.append(g)
    return gammas


# ---------------------------------------------------------------------------
# Data construction
# ---------------------------------------------------------------------------

def _load_csv(path: Path, num_classes: Optional[int]) -> LabeledDataset:
    from dataset_io import load_dataset_csv

    return load_dataset_csv(path, num_classes)


def _server_spec(server: Dict[str, Any]) -> Optional[ServerDataSpec]:
    kind = str(server.get("kind", "iid" if "n0" in server else "none")).lower()
    if kind == "none":
        return None
    if kind == "iid":
        return IidSubsample(_as_int("dataset.server.n0", server.get("n0", 0), 0))
    if kind == "clients":
        return FromClients(_as_int("dataset.server.num_clients", server.get("num_clients", 1), 1),
                           _as_int("dataset.server.samples_per_client",
                                   server.get("samples_per_client", 1), 1))
    if kind == "shifted":
        return Shifted(_as_int("dataset.server.n0", server.get("n0", 0), 0),
                       _as_float("dataset.server.shift", server.get("shift", 0.0)),
                       tuple(int(c) for c in server.get("drop_classes", ())))
    raise ConfigError("dataset.server.kind", f"unknown server data kind {kind!r}")


def build_federated_data(block: DatasetBlock, num_clients: int) -> FederatedData:
    """Clients, server data and test set described by a dataset block."""
    p = block.params
    if block.kind == "quadratic":
        return quadratic_testbed(p["client_centers"], p["server_center"], p["samples_per_party"])

    test_cfg = block.test
    test_seed = int(test_cfg.get("seed", 1))
    if block.kind == "blobs":
        train = gen_blobs(p["num_classes"], p["per_class"], p["dim"], p["spread"],
                          p["seed"], p["radius"])
        per_class = int(test_cfg.get("per_class", max(1, p["per_class"] // 4)))
        test = gen_blobs(p["num_classes"], per_class, p["dim"], p["spread"],
                         test_seed + 10_000 * (p["seed"] + 1), p["radius"])
    else:
        data = _load_csv(p["path"], p.get("num_classes"))
        if "path" in test_cfg:
            train, test = data, _load_csv(test_cfg["path"], data.num_classes)
        else:
            train, test = train_test_split(data, float(test_cfg.get("fraction", 0.2)), test_seed)

    part = block.partition
    spec = PartitionSpec(num_clients, int(part.get("C", train.num_classes)), int(part.get("seed", 0)))
    clients = partition_by_class(train, spec)

    server_spec = _server_spec(block.server)
    if server_spec is None:
        server = LabeledDataset.empty(train.dim, train.num_classes)
    else:
        server = build_server_data(train, clients, server_spec, int(block.server.get("seed", 0)))
    logger.info("data: %d clients of %d samples, |D0|=%d, |test|=%d",
                len(clients), len(clients[0]), len(server), len(test))
    return FederatedData(clients=clients, server=server, test=test)


def _train_size(block: DatasetBlock) -> int:
    p = block.params
    if block.kind == "blobs":
        return p["num_classes"] * p["per_class"]
    if block.kind == "quadratic":
        return len(p["client_centers"]) * p["samples_per_party"]
    with Path(p["path"]).open(encoding="utf-8") as fh:
        rows = sum(1 for line in fh if line.strip()) - 1
    if "path" in block.test:
        return rows
    fraction = float(block.test.get("fraction", 0.2))
    return int(round(rows * (1.0 - fraction)))


def _server_size(block: DatasetBlock) -> int:
    if block.kind == "quadratic":
        return block.params["samples_per_party"]
    spec = _server_spec(block.server)
    if spec is None:
        return 0
    if isinstance(spec, FromClients):
        return spec.num_clients * spec.samples_per_client
    return spec.n0


# ---------------------------------------------------------------------------
# Validation helpers
# ---------------------------------------------------------------------------

def _section(doc: Dict[str, Any], name: str, required: bool = True) -> Dict[str, Any]:
    value = doc.get(name)
    if value is None:
        if required:
            raise ConfigError(name, "missing section")
        return {}
    if not isinstance(value, dict):
        raise ConfigError(name, "must be a table")
    return value


def _reject_unknown(prefix: str, doc: Dict[str, Any], allowed) -> None:
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"{prefix}.{key}" if prefix else key, "unknown key")


def _as_int(name: str, value: Any, minimum: int = 0) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(name, f"must be an integer, got {value!r}")
    if value < minimum:
        raise ConfigError(name, f"must be >= {minimum}, got {value}")
    return value


def _as_float(name: str, value: Any) -> float:
    if isinstance(value, bool):
        raise ConfigError(name, f"must be a number, got {value!r}")
    try:
        number = float(value)
    except (TypeError, ValueError):
        raise ConfigError(name, f"must be a number, got {value!r}") from None
    if not math.isfinite(number) or number < 0:
        raise ConfigError(name, f"must be a finite non-negative number, got {value!r}")
    return number


def _existing(base_dir: Path, value: Any, name: str) -> Path:
    path = Path(value)
    if not path.is_absolute():
        path = base_dir / path
    if not path.exists():
        raise ConfigError(name, f"{path} does not exist")
    return path
