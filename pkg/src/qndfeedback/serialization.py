"""Config files, run manifests and the CSV/JSON output formats."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping

from .engine import BatchSummary, TrajectoryResult
from .protocol import FeedbackPolicy, ProtocolConfig, parse_mode

SCHEMA_VERSION = 1
SIG_DIGITS = 12

CSV_COLUMNS = (
    "n",
    "outcome",
    "lambda",
    "overlap",
    "entropy",
    "c_lur",
    "purity",
    "mean_jzp",
    "mean_jym",
    "mean_jxm",
    "mean_jxp",
    "var_jzp",
    "var_jym",
    "var_jxm",
)

class ConfigError(ValueError):
    """Malformed config file or invalid parameter combination."""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_int(text: str) -> int:
    # accept integral floats such as 5e4 for photon budgets
    try:
        return int(text)
    except ValueError:
        val = float(text)
        if not val.is_integer():
            raise ConfigError(f"not an integer: {text!r}") from None
        return int(val)


_PARSERS = {
    "n_atoms": _parse_int,
    "chi": float,
    "omega": float,
    "omega_div_pi": float,
    "eta": float,
    "photons": _parse_int,
    "feedback": parse_mode,
    "cut_scale": float,
    "activation_step": _parse_int,
    "approx_base": str,
    "seed": _parse_int,
    "stride": _parse_int,
    "accumulated_angle": _parse_bool,
}


def parse_config_text(text: str) -> dict[str, Any]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, val = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _PARSERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _PARSERS[key](val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    if "omega" in values and "omega_div_pi" in values:
        raise ConfigError("give omega or omega_div_pi, not both")
    return values


def build_config(values: Mapping[str, Any], base: ProtocolConfig | None = None) -> ProtocolConfig:
    """Overlay parsed key/values on ``base`` (library defaults when omitted)."""
    base = base or ProtocolConfig()
    pol = base.policy
    omega = base.omega
    if values.get("omega") is not None:
        omega = values["omega"]
    elif values.get("omega_div_pi") is not None:
        omega = values["omega_div_pi"] * math.pi

    def pick(key, default):
        val = values.get(key)
        return default if val is None else val

    try:
        policy = FeedbackPolicy(
            mode=pick("feedback", pol.mode),
            cut_scale=pick("cut_scale", pol.cut_scale),
            activation_step=pick("activation_step", pol.activation_step),
            approx_base=pick("approx_base", pol.approx_base),
        )
        return ProtocolConfig(
            n_atoms=pick("n_atoms", base.n_atoms),
            chi=pick("chi", base.chi),
            omega=omega,
            eta=pick("eta", base.eta),
            n_photons=pick("photons", base.n_photons),
            policy=policy,
            seed=pick("seed", base.seed),
            record_stride=pick("stride", base.record_stride),
            accumulated_angle=pick("accumulated_angle", base.accumulated_angle),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def config_to_dict(config: ProtocolConfig) -> dict[str, Any]:
    pol = config.policy
    return {
        "n_atoms": config.n_atoms,
        "chi": config.chi,
        "omega": config.omega,
        "eta": config.eta,
        "photons": config.n_photons,
        "feedback": pol.mode.value,
        "cut_scale": pol.cut_scale,
        "activation_step": pol.activation_step,
        "approx_base": pol.approx_base,
        "seed": config.seed,
        "stride": config.record_stride,
        "accumulated_angle": config.accumulated_angle,
    }


def format_config(config: ProtocolConfig) -> str:
    """Config file text; floats use ``repr`` so a reparse is exact."""
    lines = []
    for key, val in config_to_dict(config).items():
        if isinstance(val, bool):
            val = "true" if val else "false"
        elif isinstance(val, float):
            val = repr(val)
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


def read_config(path: str | os.PathLike) -> dict[str, Any]:
    """Key/values from a config file or from the ``config`` block of a manifest."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        block = doc.get("manifest", doc).get("config")
        if not isinstance(block, dict):
            raise ConfigError(f"{path}: JSON file has no config block")
        return parse_config_text(
            "\n".join(f"{k} = {'true' if v is True else 'false' if v is False else v}"
                      for k, v in block.items())
        )
    return parse_config_text(text)


def round_sig(x: float, digits: int = SIG_DIGITS) -> float:
    if not math.isfinite(x):
        return x
    return float(f"{x:.{digits}g}")


# blocks that must reproduce a run bit-for-bit are written at full precision
EXACT_KEYS = frozenset({"config"})


def _rounded(obj):
    if isinstance(obj, bool) or obj is None or isinstance(obj, (int, str)):
        return obj
    if isinstance(obj, float):
        return round_sig(obj)
    if isinstance(obj, Mapping):
        return {k: v if k in EXACT_KEYS else _rounded(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_rounded(v) for v in obj]
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps_json(doc: Mapping[str, Any]) -> str:
    """JSON with 12 significant digits (config blocks exact) and insertion-ordered keys."""
    return json.dumps(_rounded(doc), indent=2, allow_nan=True) + "\n"


def timestamp() -> str:
    """UTC time of the run; ``SOURCE_DATE_EPOCH`` pins it for reproducible builds."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = (
        datetime.fromtimestamp(int(epoch), tz=timezone.utc)
        if epoch
        else datetime.now(tz=timezone.utc)
    )
    return when.strftime("%Y-%m-%dT%H:%M:%SZ")


def make_manifest(config: ProtocolConfig, outputs: list[str], master_seed: int | None = None) -> dict:
    from . import __version__

    return {
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "timestamp": timestamp(),
        "master_seed": config.seed if master_seed is None else master_seed,
        "outputs": outputs,
        "config": config_to_dict(config),
    }


def _cell(x: float | None) -> str:
    if x is None:
        return ""
    return f"{x:.{SIG_DIGITS}g}"


def trajectory_csv(result: TrajectoryResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rec in result.series:
        m = rec.metrics
        writer.writerow(
            [
                m.n,
                rec.outcome,
                _cell(rec.lambda_applied),
                _cell(m.overlap),
                _cell(m.entropy),
                _cell(m.c_lur),
                _cell(m.purity),
                _cell(m.mean_jzp),
                _cell(m.mean_jym),
                _cell(m.mean_jxm),
                _cell(m.mean_jxp),
                _cell(m.var_jzp),
                _cell(m.var_jym),
                _cell(m.var_jxm),
            ]
        )
    return buf.getvalue()


def write_text(path: str | os.PathLike, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def batch_document(summary: BatchSummary, manifest: dict | None = None) -> dict:
    doc: dict[str, Any] = {
        "runs": summary.n_runs,
        "thresholds": list(summary.thresholds),
        "fractions": summary.fractions(),
        "wilson_ci": [list(ci) for ci in summary.wilson_ci()],
        "mean_final_overlap": summary.mean_final_overlap,
        "mean_final_c_lur": summary.mean_final_c_lur,
        "broken_count": summary.broken_count,
        "failed_runs": summary.failed_count,
        "config": config_to_dict(summary.config),
    }
    if summary.noise_level:
        doc["noise_level"] = summary.noise_level
    done = summary.completed
    checkpoints = sorted(done[0].checkpoints) if done else []
    if checkpoints:
        doc["checkpoints"] = {
            str(c): {
                "fractions": summary.fractions(at=c),
                "wilson_ci": [list(ci) for ci in summary.wilson_ci(at=c)],
            }
            for c in checkpoints
        }
    if manifest is not None:
        doc["manifest"] = manifest
    return doc

