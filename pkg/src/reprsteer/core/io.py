"""Checkpoint containers for models and transformation blocks.

Both formats are ``.npz`` archives with a JSON ``__meta__`` entry holding a
``format`` tag and ``version``; arrays are stored under their parameter names.
"""
import json
import zipfile
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from ..tokenizer import WordTokenizer
from .lm import LMConfig, ModelBundle
from .transform import TransformBlock, TransformBlockConfig

FORMAT_VERSION = 1


def _write(path, meta, arrays):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"__meta__": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    payload.update(arrays)
    # fixed timestamps and member order keep identical weights byte-identical on disk
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(payload):
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asarray(payload[name]), allow_pickle=False)
    return path


def _read(path, expected_format):
    with np.load(Path(path), allow_pickle=False) as data:
        if "__meta__" not in data:
            raise ConfigError(f"{path}: missing metadata")
        meta = json.loads(data["__meta__"].tobytes().decode())
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    if meta.get("format") != expected_format:
        raise ConfigError(f"{path}: expected {expected_format} checkpoint, found {meta.get('format')}")
    if meta.get("version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    return meta, arrays


def save_transform(path, tau, extra=None):
    meta = {"format": "transform_block", "version": FORMAT_VERSION, "config": tau.config.to_dict(),
            "extra": extra or {}}
    return _write(path, meta, tau.flat_params())


def load_transform(path):
    meta, arrays = _read(path, "transform_block")
    config = TransformBlockConfig(**meta["config"])
    subs = [{k: arrays[f"{i}.{k}"] for k in ("W_in", "b_in", "W_out", "b_out")}
            for i in range(config.num_blocks)]
    return TransformBlock(config, subs)


def save_model(path, model, extra=None):
    meta = {"format": "causal_lm", "version": FORMAT_VERSION, "config": model.config.to_dict(),
            "tokenizer": model.tokenizer.to_dict(), "head_locked": model.head_locked,
            "extra": extra or {}}
    return _write(path, meta, model.params)


def load_model(path):
    meta, arrays = _read(path, "causal_lm")
    return ModelBundle(LMConfig(**meta["config"]), arrays,
                       WordTokenizer.from_dict(meta["tokenizer"]), bool(meta["head_locked"]))


def read_meta(path):
    with np.load(Path(path), allow_pickle=False) as data:
        return json.loads(data["__meta__"].tobytes().decode())
