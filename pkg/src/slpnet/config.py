"""Plain-text configuration: one `dotted.key = value` per line.

Grammar:
  - blank lines and lines starting with '#' are ignored; '#' also starts an
    inline comment
  - keys are dotted lowercase words; values parse as int, float, bool
    (true/false), a comma-separated list of those, or a bare string
  - unknown keys are rejected so typos surface immediately

The shipped defaults are the simulation-settings table values; the training
sample count defaults to the desk-scale 5000 (see configs/fullscale.cfg for the
full-size run).
"""


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 7,
    "model.n_t": 4,
    "model.n_users": 4,
    "model.modulation_order": 4,
    "model.noise_power": 1.0,
    "train.samples": 5000,
    "train.batch_size": 200,
    "train.learning_rate": 0.001,
    "train.decay": 0.65,
    "train.reg_weight": 0.001,
    "train.blocks": 2,
    "train.pum_iters": 15,
    "train.apb_iters": 10,
    "train.sinr_low_db": 0.0,
    "train.sinr_high_db": 45.0,
    "train.hinge_weight": 1.0,
    "train.optimizer": "adam",
    "train.weight_init": "xavier",
    "test.samples": 2000,
    "test.sinr_low_db": 0.0,
    "test.sinr_high_db": 35.0,
    "robust.err_bound_sq": 1e-4,
    "solver.eps": 1e-6,
    "solver.barrier_decrease": 0.1,
    "solver.max_outer": 24,
    "sweep.sinr_grid_db": [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0],
    "sweep.errorbound_sq_grid": [0.0, 1e-4, 1e-3],
    "sweep.robust_sinr_db": 30.0,
    "sweep.samples": 500,
    "sweep.schemes": ["blp", "slp_strict", "slp_relaxed"],
    "sweep.errorbound_schemes": ["slp_robust"],
    "bench.timing_users": [2, 3, 4, 5, 6, 7, 8],
    "bench.timing_samples": 200,
    "bench.warmup": 3,
    "checkpoint.slp_dnet_relaxed": "",
    "checkpoint.slp_dnet_strict": "",
    "checkpoint.robust_slp_dnet": "",
}


def parse_value(text):
    text = text.strip()
    if "," in text:
        return [parse_value(part) for part in text.split(",") if part.strip()]
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def load_config(path=None, overrides=None):
    """Defaults, overlaid by the file at `path`, overlaid by `overrides`."""
    cfg = dict(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                lines = fh.readlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        for lineno, raw in enumerate(lines, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in cfg:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            cfg[key] = parse_value(value)
    for key, value in (overrides or {}).items():
        if key not in cfg:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = value
    return cfg


def as_list(value):
    return value if isinstance(value, list) else [value]
