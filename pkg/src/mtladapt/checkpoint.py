"""Checkpoints: a JSON manifest plus a raw little-endian float64 blob.

``<stem>.json`` holds ``{"format", "config", "params": [{name, shape, offset, nbytes}]}``
and ``<stem>.bin`` the concatenated parameter bytes in manifest order. Adapters
(with heads) and base weights are written as separate checkpoints so adapters can
be swapped over the same base.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigError

FORMAT = "mtladapt-ckpt-v1"
_DTYPE = np.dtype("<f8")


def save(stem, named_arrays, config=None):
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(stem.with_suffix(".bin"), "wb") as fh:
        for name, arr in named_arrays:
            data = np.ascontiguousarray(getattr(arr, "data", arr), dtype=_DTYPE)
            fh.write(data.tobytes())
            entries.append(
                {"name": name, "shape": list(data.shape), "offset": offset, "nbytes": data.nbytes}
            )
            offset += data.nbytes
    manifest = {"format": FORMAT, "dtype": "float64-le", "config": config or {}, "params": entries}
    stem.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def load(stem):
    """Return ``(config, [(name, array), ...])`` in stored order."""
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    manifest = json.loads(stem.with_suffix(".json").read_text())
    if manifest.get("format") != FORMAT:
        raise ConfigError(f"{stem}.json is not a {FORMAT} manifest")
    blob = stem.with_suffix(".bin").read_bytes()
    out = []
    for e in manifest["params"]:
        chunk = blob[e["offset"]: e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise ConfigError(f"blob truncated at parameter {e['name']!r}")
        out.append((e["name"], np.frombuffer(chunk, dtype=_DTYPE).reshape(e["shape"]).copy()))
    return manifest["config"], out


def save_model(model, directory):
    """Write ``adapters.{json,bin}`` (adapters + heads) and ``base.{json,bin}``."""
    directory = Path(directory)
    config = {
        "model": model.config.to_dict(),
        "adapter": None if model.adapter_config is None else model.adapter_config.to_dict(),
    }
    save(directory / "adapters", model.trainable_parameters(), config)
    save(directory / "base", model.frozen_parameters(), {"model": model.config.to_dict()})


def load_into(model, stem, strict=True):
    """Copy stored arrays into the model's parameters with matching names."""
    _, arrays = load(stem)
    params = dict(model.trainable_parameters() + model.frozen_parameters())
    for name, arr in arrays:
        if name not in params:
            if strict:
                raise ConfigError(f"checkpoint parameter {name!r} not present in model")
            continue
        if params[name].shape != arr.shape:
            raise ConfigError(f"shape mismatch for {name!r}: {arr.shape} vs {params[name].shape}")
        params[name].data[...] = arr
    return model
