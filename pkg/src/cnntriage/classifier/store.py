"""On-disk model store: ``model.json`` metadata plus one raw little-endian
float32 file per parameter under ``tensors/<layer>.<param>.f32``."""

from __future__ import annotations

import json
import shutil
import tempfile
from pathlib import Path

import numpy as np

from .network import Model, NetworkConfig, init_model

FORMAT_VERSION = 1
TENSOR_DTYPE = np.dtype("<f4")


class ModelStoreError(Exception):
    pass


def save_model(model: Model, directory: str | Path) -> Path:
    """Write the store atomically (temp dir then rename); replaces ``directory``."""
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".tmp-model-", dir=directory.parent))
    try:
        (tmp / "tensors").mkdir()
        entries = []
        for layer, pname, arr in model.tensors():
            fname = f"{layer}.{pname}.f32"
            (tmp / "tensors" / fname).write_bytes(arr.astype(TENSOR_DTYPE).tobytes(order="C"))
            entries.append({"layer": layer, "param": pname, "shape": list(arr.shape),
                            "file": f"tensors/{fname}"})
        meta = {
            "format_version": FORMAT_VERSION,
            "dtype": "float32",
            "byte_order": "little",
            "config": model.config.to_dict(),
            "tensors": entries,
        }
        (tmp / "model.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
        if directory.exists():
            shutil.rmtree(directory)
        tmp.rename(directory)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return directory


def load_model(directory: str | Path, expected_config: NetworkConfig | None = None) -> Model:
    """Read a store; every tensor is checked against the stored config before a
    Model is built, so a failure never yields a partial model."""
    directory = Path(directory)
    meta_path = directory / "model.json"
    if not meta_path.is_file():
        raise ModelStoreError(f"no model.json in {directory}")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelStoreError(f"{meta_path}: invalid JSON: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise ModelStoreError(
            f"{meta_path}: format version {meta.get('format_version')!r}, "
            f"this reader supports {FORMAT_VERSION}"
        )
    if meta.get("dtype") != "float32" or meta.get("byte_order") != "little":
        raise ModelStoreError(f"{meta_path}: only little-endian float32 tensors are supported")
    try:
        config = NetworkConfig.from_dict(meta["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelStoreError(f"{meta_path}: bad config: {exc}") from exc
    if expected_config is not None and config != expected_config:
        raise ModelStoreError(
            f"{directory}: stored topology {config.name!r} does not match the expected config"
        )

    listed = {(t["layer"], t["param"]): t for t in meta.get("tensors", [])}
    params: dict[str, dict[str, np.ndarray]] = {}
    for _, spec in config.param_layers():
        params[spec.name] = {}
        for pname, shape in spec.param_shapes().items():
            key = f"{spec.name}.{pname}"
            t = listed.get((spec.name, pname))
            if t is None:
                raise ModelStoreError(f"tensor {key} missing from metadata")
            if tuple(t["shape"]) != shape:
                raise ModelStoreError(
                    f"tensor {key}: metadata shape {tuple(t['shape'])} != config shape {shape}"
                )
            path = directory / t["file"]
            if not path.is_file():
                raise ModelStoreError(f"tensor {key}: file {path} missing")
            raw = path.read_bytes()
            expected = int(np.prod(shape)) * TENSOR_DTYPE.itemsize
            if len(raw) != expected:
                raise ModelStoreError(
                    f"tensor {key}: {len(raw)} bytes on disk, expected {expected} (truncated?)"
                )
            arr = np.frombuffer(raw, dtype=TENSOR_DTYPE).reshape(shape)
            params[spec.name][pname] = arr.astype(np.float32)
    return Model(config, params)


def init_from_pretrained(config: NetworkConfig, directory: str | Path, seed: int,
                         layers: set[str] | None = None) -> Model:
    """Fresh model whose conv layers (or ``layers``) are copied from a store.

    This is the hook for externally converted ImageNet weights: blocks come
    from the store, the dense head stays freshly initialized.
    """
    source = load_model(directory)
    model = init_model(config, seed)
    wanted = layers if layers is not None else {
        s.name for _, s in config.param_layers() if s.kind == "conv"
    }
    for name in wanted:
        if name not in source.params:
            raise ModelStoreError(f"layer {name!r} not present in {directory}")
        for pname, arr in source.params[name].items():
            if arr.shape != model.params[name][pname].shape:
                raise ModelStoreError(f"layer {name}.{pname}: shape {arr.shape} "
                                      f"!= {model.params[name][pname].shape}")
            model.params[name][pname] = arr.copy()
    return model
