"""INI run configuration: parsing with field-level errors and a lossless manifest dump."""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace

from .bandit import BanditInstance
from .dynamics import PRESET_BOUNDS, PRESETS, DynamicsConfig
from .objectives import HYPERPARAMETERS, METHODS, MethodSpec, canonical_method
from .wer import WeightScheme

COMMANDS = ("reproduce", "train", "dynamics", "sweep", "gradcheck", "concentrability")
SETUP_CHOICES = ("instance1", "instance2", "both", "type2", "file")
OUTPUT_ENV = "POWERLAB_OUTPUT_DIR"
DEFAULT_OUTPUT = "powerlab-out"


class ConfigError(ValueError):
    """Invalid configuration; ``where`` names the offending section and key."""

    def __init__(self, where: str, message: str):
        super().__init__(f"{where}: {message}")
        self.where = where


def fmt(value) -> str:
    """Text form used in manifests; floats keep full precision."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(fmt(v) for v in value)
    return str(value)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


# ---------------------------------------------------------------------------
# instances as text


def instance_to_text(instance: BanditInstance) -> str:
    pairs = ",".join(f"{i}-{j}:{p!r}" for (i, j), p in instance.pair_dist.items())
    return (
        "[instance]\n"
        f"rewards = {fmt(tuple(float(r) for r in instance.true_rewards))}\n"
        f"lengths = {fmt(tuple(int(v) for v in instance.lengths))}\n"
        f"pairs = {pairs}\n"
    )


def _instance_from_section(section, where: str) -> BanditInstance:
    try:
        rewards = _floats(section["rewards"])
        lengths = tuple(int(v) for v in section.get("lengths", ",".join(["1"] * len(rewards))).split(","))
        pairs = {}
        for item in section["pairs"].split(","):
            key, prob = item.split(":")
            i, j = key.split("-")
            pairs[(int(i), int(j))] = float(prob)
        return BanditInstance(rewards, lengths, pairs)
    except KeyError as exc:
        raise ConfigError(where, f"missing key {exc.args[0]!r}") from None
    except ValueError as exc:
        raise ConfigError(where, str(exc)) from None


def instance_from_text(text: str) -> BanditInstance:
    parser = configparser.ConfigParser()
    parser.read_string(text)
    if "instance" not in parser:
        raise ConfigError("[instance]", "section missing")
    return _instance_from_section(parser["instance"], "[instance]")


# ---------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class TrainSettings:
    learning_rate: float | None = None  # None: pick 1/L per problem
    steps: int = 5000
    record_every: int = 1
    label_update: bool = False
    theta0: tuple[float, ...] | None = None


@dataclass(frozen=True)
class DynamicsSettings:
    preset: str | None = "thm3-low"
    alpha: float | None = None
    gamma: float | None = None
    mu_pair: float | None = None
    mu_win: float | None = None
    d0: float | None = None
    horizon: float | None = None
    step: float | None = None
    eps_l: float = PRESET_BOUNDS["eps_l"]
    mu_l: float = PRESET_BOUNDS["mu_l"]
    mu_h: float = PRESET_BOUNDS["mu_h"]

    def resolve(self) -> DynamicsConfig:
        values = dict(PRESETS[self.preset]) if self.preset else {}
        for name in ("alpha", "gamma", "mu_pair", "mu_win", "d0", "horizon", "step"):
            if getattr(self, name) is not None:
                values[name] = getattr(self, name)
        missing = [n for n in ("alpha", "gamma", "mu_pair", "mu_win", "d0", "horizon") if n not in values]
        if missing:
            raise ConfigError("[dynamics]", f"missing {', '.join(missing)} (or set preset)")
        try:
            return DynamicsConfig(**values)
        except ValueError as exc:
            raise ConfigError("[dynamics]", str(exc)) from None


@dataclass(frozen=True)
class RunConfig:
    command: str
    seed: int = 0
    trials: int = 100
    workers: int = 1
    output_dir: str | None = None
    prop: int = 1
    setup: str = "instance2"
    n: int = 10
    n_values: tuple[int, ...] = (2, 5, 10, 50)
    instance_path: str | None = None
    mode: str = "forced"
    event_trials: int = 0
    sweep_kind: str = "prop"
    methods: tuple[MethodSpec, ...] = ()
    train: TrainSettings = field(default_factory=TrainSettings)
    dynamics: DynamicsSettings = field(default_factory=DynamicsSettings)
    gradcheck_samples: int = 100
    gradcheck_h: float = 1e-5
    gradcheck_methods: tuple[str, ...] = METHODS
    conc_pi: tuple[float, ...] = (1.0, 0.0, 0.0)
    conc_baseline: tuple[float, ...] = (1.0, 1.0, 1.0)
    conc_grid_step: float = 0.1
    conc_cap: float = 1.0

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError("[run] command", f"must be one of {', '.join(COMMANDS)}, got {self.command!r}")
        checks = [
            ("[run] trials", self.trials >= 1, "must be >= 1"),
            ("[run] workers", self.workers >= 1, "must be >= 1"),
            ("[instance] setup", self.setup in SETUP_CHOICES, f"must be one of {', '.join(SETUP_CHOICES)}"),
            ("[instance] n", self.n >= 2, "must be >= 2"),
            ("[instance] n_values", all(v >= 2 for v in self.n_values), "every entry must be >= 2"),
            ("[instance] mode", self.mode in ("forced", "filtered"), "must be forced or filtered"),
            ("[run] prop", self.prop in (1, 2, 4), "must be 1, 2 or 4"),
            ("[sweep] kind", self.sweep_kind in ("prop", "thm3"), "must be prop or thm3"),
            ("[train] steps", self.train.steps >= 1, "must be >= 1"),
            ("[train] record_every", 1 <= self.train.record_every <= self.train.steps, "must lie in [1, steps]"),
            ("[gradcheck] samples", self.gradcheck_samples >= 1, "must be >= 1"),
        ]
        for where, ok, message in checks:
            if not ok:
                raise ConfigError(where, message)
        if self.train.learning_rate is not None and not self.train.learning_rate >= 0:
            raise ConfigError("[train] learning_rate", "must be >= 0 or auto")
        if self.setup == "file":
            if not self.instance_path:
                raise ConfigError("[instance] path", "required when setup = file")
            if not os.path.isfile(self.instance_path):
                raise ConfigError("[instance] path", f"file {self.instance_path!r} does not exist")
        if self.dynamics.preset is not None and self.dynamics.preset not in PRESETS:
            raise ConfigError("[dynamics] preset", f"must be one of {', '.join(PRESETS)}")
        for name in self.gradcheck_methods:
            try:
                canonical_method(name)
            except ValueError as exc:
                raise ConfigError("[gradcheck] methods", str(exc)) from None

    def resolved_output_dir(self) -> str:
        return self.output_dir or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT

    def replace(self, **changes) -> "RunConfig":
        return replace(self, **changes)

    def to_ini(self) -> str:
        """Manifest text; loading it with :func:`parse_config` gives back an equal config."""
        parser = configparser.ConfigParser()
        parser["run"] = {
            "command": self.command,
            "seed": fmt(self.seed),
            "trials": fmt(self.trials),
            "workers": fmt(self.workers),
            "prop": fmt(self.prop),
        }
        if self.output_dir:
            parser["run"]["output_dir"] = self.output_dir
        parser["instance"] = {
            "setup": self.setup,
            "n": fmt(self.n),
            "n_values": fmt(self.n_values),
            "mode": self.mode,
            "event_trials": fmt(self.event_trials),
        }
        if self.instance_path:
            parser["instance"]["path"] = self.instance_path
        for i, spec in enumerate(self.methods):
            parser[f"method.{i}"] = {k: fmt(v) for k, v in spec.to_dict().items()}
        t = self.train
        parser["train"] = {
            "learning_rate": "auto" if t.learning_rate is None else fmt(t.learning_rate),
            "steps": fmt(t.steps),
            "record_every": fmt(t.record_every),
            "label_update": fmt(t.label_update),
        }
        if t.theta0 is not None:
            parser["train"]["theta0"] = fmt(t.theta0)
        dyn = {"preset": self.dynamics.preset or "none"}
        for f in fields(DynamicsSettings):
            value = getattr(self.dynamics, f.name)
            if f.name != "preset" and value is not None:
                dyn[f.name] = fmt(float(value))
        parser["dynamics"] = dyn
        parser["sweep"] = {"kind": self.sweep_kind}
        parser["gradcheck"] = {
            "samples": fmt(self.gradcheck_samples),
            "h": fmt(self.gradcheck_h),
            "methods": ",".join(self.gradcheck_methods),
        }
        parser["concentrability"] = {
            "pi": fmt(self.conc_pi),
            "baseline": fmt(self.conc_baseline),
            "grid_step": fmt(self.conc_grid_step),
            "cap": fmt(self.conc_cap),
        }
        out = []
        for name in parser.sections():
            out.append(f"[{name}]")
            out.extend(f"{k} = {v}" for k, v in parser[name].items())
            out.append("")
        return "\n".join(out)


def _get(section, key, convert, where, default):
    if key not in section:
        return default
    raw = section[key].strip()
    try:
        return convert(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where} {key}", f"cannot parse {raw!r} ({exc})") from None


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true or false")


def _int(text: str) -> int:
    value = float(text)
    if value != int(value):
        raise ValueError("expected an integer")
    return int(value)


def _method_from_section(section, where: str) -> MethodSpec:
    data = {}
    for key, raw in section.items():
        if key == "method":
            data[key] = raw.strip()
        elif key in HYPERPARAMETERS or key == "label_init":
            data[key] = _get(section, key, float, where, None)
        elif key == "weights":
            data[key] = _get(section, key, WeightScheme.from_text, where, None)
        elif key == "label_estimate":
            data[key] = raw.strip()
        else:
            raise ConfigError(f"{where} {key}", "unknown method field")
    if "method" not in data:
        raise ConfigError(f"{where} method", "missing")
    try:
        return MethodSpec.from_dict(data)
    except ValueError as exc:
        raise ConfigError(where, str(exc)) from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse INI text.  Keys absent from the text keep the values of ``base``."""
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("config", str(exc).splitlines()[0]) from None
    known = {"run", "instance", "train", "dynamics", "sweep", "gradcheck", "concentrability"}
    for name in parser.sections():
        if name not in known and not name.startswith("method."):
            raise ConfigError(f"[{name}]", "unknown section")

    cur = base or RunConfig(command=parser.get("run", "command", fallback="reproduce").strip())
    run = parser["run"] if "run" in parser else {}
    inst = parser["instance"] if "instance" in parser else {}
    tr = parser["train"] if "train" in parser else {}
    dy = parser["dynamics"] if "dynamics" in parser else {}
    sw = parser["sweep"] if "sweep" in parser else {}
    gc = parser["gradcheck"] if "gradcheck" in parser else {}
    cc = parser["concentrability"] if "concentrability" in parser else {}

    methods = tuple(
        _method_from_section(parser[name], f"[{name}]") for name in parser.sections() if name.startswith("method.")
    ) or cur.methods

    lr = _get(tr, "learning_rate", lambda s: None if s == "auto" else float(s), "[train]", cur.train.learning_rate)
    train = TrainSettings(
        learning_rate=lr,
        steps=_get(tr, "steps", _int, "[train]", cur.train.steps),
        record_every=_get(tr, "record_every", _int, "[train]", cur.train.record_every),
        label_update=_get(tr, "label_update", _bool, "[train]", cur.train.label_update),
        theta0=_get(tr, "theta0", _floats, "[train]", cur.train.theta0),
    )
    dyn_kwargs = {}
    for f in fields(DynamicsSettings):
        if f.name == "preset":
            dyn_kwargs["preset"] = _get(dy, "preset", lambda s: None if s == "none" else s, "[dynamics]",
                                        cur.dynamics.preset)
        else:
            dyn_kwargs[f.name] = _get(dy, f.name, float, "[dynamics]", getattr(cur.dynamics, f.name))
    for key in dy:
        if key not in dyn_kwargs:
            raise ConfigError(f"[dynamics] {key}", "unknown key")

    return RunConfig(
        command=_get(run, "command", str, "[run]", cur.command),
        seed=_get(run, "seed", _int, "[run]", cur.seed),
        trials=_get(run, "trials", _int, "[run]", cur.trials),
        workers=_get(run, "workers", _int, "[run]", cur.workers),
        output_dir=_get(run, "output_dir", str, "[run]", cur.output_dir),
        prop=_get(run, "prop", _int, "[run]", cur.prop),
        setup=_get(inst, "setup", str, "[instance]", cur.setup),
        n=_get(inst, "n", _int, "[instance]", cur.n),
        n_values=_get(inst, "n_values", lambda s: tuple(_int(v) for v in s.split(",")), "[instance]", cur.n_values),
        instance_path=_get(inst, "path", str, "[instance]", cur.instance_path),
        mode=_get(inst, "mode", str, "[instance]", cur.mode),
        event_trials=_get(inst, "event_trials", _int, "[instance]", cur.event_trials),
        sweep_kind=_get(sw, "kind", str, "[sweep]", cur.sweep_kind),
        methods=methods,
        train=train,
        dynamics=DynamicsSettings(**dyn_kwargs),
        gradcheck_samples=_get(gc, "samples", _int, "[gradcheck]", cur.gradcheck_samples),
        gradcheck_h=_get(gc, "h", float, "[gradcheck]", cur.gradcheck_h),
        gradcheck_methods=_get(gc, "methods", lambda s: tuple(v.strip() for v in s.split(",")), "[gradcheck]",
                               cur.gradcheck_methods),
        conc_pi=_get(cc, "pi", _floats, "[concentrability]", cur.conc_pi),
        conc_baseline=_get(cc, "baseline", _floats, "[concentrability]", cur.conc_baseline),
        conc_grid_step=_get(cc, "grid_step", float, "[concentrability]", cur.conc_grid_step),
        conc_cap=_get(cc, "cap", float, "[concentrability]", cur.conc_cap),
    )


def load_config(path: str, base: RunConfig | None = None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path!r}: {exc.strerror}") from None
    return parse_config(text, base)
