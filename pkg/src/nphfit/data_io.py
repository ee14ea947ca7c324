"""CSV ingestion, body/tail binning and model files.

Model files (``.nph``) are JSON documents; floats are written with their
shortest round-tripping representation, so save/load is bit-exact.
"""

import csv
import json
import math
from pathlib import Path

import numpy as np

from .errors import DataError, ModelLoadError, ParameterDomainError
from .nph_model import NphModel
from .observations import Dataset
from .phase_type import validate
from .scaling import FAMILIES

MODEL_FORMAT = "nphfit-model"
MODEL_VERSION = 1

_HEADERS = {
    "exact": ["y"],
    "weighted": ["y", "weight"],
    "censored": ["lower", "upper", "weight"],
}


def _parse_float(text, path, lineno, allow_inf=False):
    t = text.strip()
    if allow_inf and t.lower() in ("inf", "+inf", "infinity"):
        return math.inf
    try:
        v = float(t)
    except ValueError:
        raise DataError(f"{path}:{lineno}: cannot parse {text!r} as a number") from None
    if not math.isfinite(v):
        raise DataError(f"{path}:{lineno}: non-finite value {text!r}")
    return v


def load_csv(path, kind="exact"):
    """Read a dataset from CSV.

    Parameters
    ----------
    path : str or Path
    kind : {"exact", "weighted", "censored"}
        Expected headers are ``y``, ``y,weight`` and ``lower,upper,weight``.
        In censored files ``upper`` may be ``inf`` (right censoring).

    Raises
    ------
    DataError
        Missing file, wrong header, malformed rows (with line numbers),
        non-positive values or an empty file.
    """
    if kind not in _HEADERS:
        raise DataError(f"unknown data kind {kind!r}; use exact, weighted or censored")
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from None
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [c.strip() for c in rows[0]]
    if header != _HEADERS[kind]:
        raise DataError(f"{path}: header {header} does not match {_HEADERS[kind]} for kind {kind!r}")
    width = len(header)
    parsed, bad = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or not "".join(row).strip():
            continue
        if len(row) != width:
            raise DataError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
        vals = [_parse_float(v, path, lineno, allow_inf=(kind == "censored" and j == 1))
                for j, v in enumerate(row)]
        if kind == "censored":
            lo, hi, w = vals
            if lo < 0 or not hi > lo or not w > 0:
                bad.append(lineno)
        elif vals[0] <= 0 or (kind == "weighted" and not vals[1] > 0):
            bad.append(lineno)
        parsed.append((lineno, vals))
    if bad:
        what = "need 0 <= lower < upper and weight > 0" if kind == "censored" else "values must be > 0"
        raise DataError(f"{path}: rejected line(s) {bad[:20]}: {what}")
    if not parsed:
        raise DataError(f"{path}: empty dataset")
    arr = np.array([v for _, v in parsed], dtype=float)
    prov = f"{path} ({kind})"
    if kind == "exact":
        return Dataset.from_exact(arr[:, 0], provenance=prov)
    if kind == "weighted":
        return Dataset.from_exact(arr[:, 0], arr[:, 1], provenance=prov)
    return Dataset.from_censored(arr[:, 0], arr[:, 1], arr[:, 2], provenance=prov)


def bin_body_tail(data, T_split, K, representative="midpoint"):
    """Histogram the body ``y < T_split`` into ``K`` equal bins; keep the tail raw.

    Body observations are replaced by one representative per non-empty bin,
    weighted by the bin's total weight.  ``"midpoint"`` uses bin centres;
    ``"left-shifted"`` uses left endpoints except for the first bin, which
    keeps its centre so that no mass lands at zero.  Repeated tail values are
    merged into weights.  Censored observations pass through unchanged.
    """
    if not T_split > 0:
        raise DataError("T_split must be > 0")
    K = int(K)
    if K < 1:
        raise DataError("K must be >= 1")
    if representative not in ("midpoint", "left-shifted"):
        raise DataError("representative must be 'midpoint' or 'left-shifted'")
    width = T_split / K
    body = data.y < T_split
    idx = np.minimum((data.y[body] / width).astype(np.int64), K - 1)
    counts = np.bincount(idx, weights=data.w[body], minlength=K)
    keep = np.flatnonzero(counts > 0)
    if representative == "midpoint":
        reps = (keep + 0.5) * width
    else:
        reps = np.where(keep == 0, 0.5 * width, keep * width)
    tail = Dataset.from_exact(data.y[~body], data.w[~body]).collapse_duplicates()
    prov = f"{data.provenance}; body [0, {T_split:g}) in {K} bins ({representative}), tail raw"
    return Dataset(y=np.concatenate([reps, tail.y]), w=np.concatenate([counts[keep], tail.w]),
                   lower=data.lower, upper=data.upper, cw=data.cw, provenance=prov.lstrip("; "))


# ---------------------------------------------------------------------------
# model files

def model_to_dict(model, metadata=None):
    fam = model.scaling
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "family": {
            "kind": fam.kind,
            "c": getattr(fam, "c", None),
            "theta": list(fam.theta),
            "theta_fixed": fam.theta_fixed,
            "i_max": fam.i_max,
        },
        "ph": {"alpha": model.ph.alpha.tolist(), "T": model.ph.T.tolist()},
        "trunc_eps": model.trunc_eps,
        "metadata": metadata or {},
    }


def _field(doc, *keys):
    cur = doc
    for depth, key in enumerate(keys):
        if not isinstance(cur, dict) or key not in cur:
            raise ModelLoadError(f"model file is missing field {'.'.join(keys[:depth + 1])!r}")
        cur = cur[key]
    return cur


def model_from_dict(doc):
    if _field(doc, "format") != MODEL_FORMAT:
        raise ModelLoadError(f"not an {MODEL_FORMAT} document")
    version = _field(doc, "version")
    if version != MODEL_VERSION:
        raise ModelLoadError(f"unsupported model file version {version!r} (expected {MODEL_VERSION})")
    kind = _field(doc, "family", "kind")
    if kind not in FAMILIES:
        raise ModelLoadError(f"unknown family kind {kind!r}")
    kwargs = dict(theta=_field(doc, "family", "theta"),
                  theta_fixed=bool(doc["family"].get("theta_fixed", False)),
                  i_max=int(doc["family"].get("i_max", 10_000)))
    if kind in ("geom-pareto", "disc-weibull"):
        kwargs["c"] = _field(doc, "family", "c")
    try:
        fam = FAMILIES[kind](**kwargs)
    except (ParameterDomainError, TypeError) as exc:
        raise ModelLoadError(f"invalid family parameters: {exc}") from None
    ph = validate(_field(doc, "ph", "alpha"), _field(doc, "ph", "T"))
    return NphModel(fam, ph, float(_field(doc, "trunc_eps")))


def save_model(model, path, metadata=None):
    """Write ``model`` (plus optional fit metadata) to a ``.nph`` JSON file."""
    text = json.dumps(model_to_dict(model, metadata), indent=2, allow_nan=False)
    Path(path).write_text(text + "\n")


def load_model(path):
    """Read a ``.nph`` file.

    Raises
    ------
    ModelLoadError
        Unreadable file, wrong version or missing fields.
    ValidationError
        The stored representation violates a phase-type invariant.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ModelLoadError(f"cannot read {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise ModelLoadError(f"{path}: not valid JSON ({exc})") from None
    return model_from_dict(doc)


def load_metadata(path):
    return json.loads(Path(path).read_text()).get("metadata", {})


# ---------------------------------------------------------------------------
# curve and trace files

def write_curve(path, y, values):
    """Two-column ``y,value`` CSV."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["y", "value"])
        for a, b in zip(np.asarray(y, dtype=float), np.asarray(values, dtype=float)):
            out.writerow([repr(float(a)), repr(float(b))])


def write_trace(path, result):
    """Per-iteration log-likelihood and scaling parameters."""
    n_theta = len(result.theta_trace[0]) if result.theta_trace else 0
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["iteration", "loglik"] + [f"theta{k}" for k in range(n_theta)])
        for it, (ll, th) in enumerate(zip(result.loglik_trace, result.theta_trace)):
            out.writerow([it, repr(float(ll))] + [repr(float(v)) for v in th])
