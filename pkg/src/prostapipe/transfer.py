"""Transfer-learning mechanics: checkpoint persistence, layer freezing, and
classifier-head replacement.

Checkpoint file layout (magic ``PXC1\\n``):

    PXC1\\n
    <decimal header byte count>\\n
    <header: key=value lines>      version, step, optimizer fields,
                                   spec_text (newlines escaped as \\n),
                                   spec_hash, array directory
    <raw data section>             little-endian float32 arrays at the
                                   offsets recorded in the directory

Weights are stored as 32-bit floats regardless of compute precision, so a
save/load roundtrip of a float32 model is bit-exact.
"""

from __future__ import annotations

import os

import numpy as np

from . import nn
from .arch import ArchSpec, Model, build_model, parse_spec_text
from .hashutil import fnv1a64
from .nn import IndexOutOfRange, seeded_rng

FORMAT_VERSION = 1
MAGIC = b"PXC1\n"


class VersionMismatch(ValueError):
    pass


class SpecHashMismatch(ValueError):
    pass


class CorruptFile(ValueError):
    pass


def spec_hash(spec: ArchSpec) -> int:
    return fnv1a64(spec.canonical_text())


def _model_arrays(model: Model):
    for name, _, _, arr in model.named_params():
        yield name, arr
    for name, _, _, arr in model.named_buffers():
        yield name, arr


def _optimizer_arrays(optimizer):
    if isinstance(optimizer, nn.Adam):
        for key, store in (("m", optimizer.m), ("v", optimizer.v)):
            for pname, arr in store.items():
                yield f"opt/{key}/{pname}", arr
    elif isinstance(optimizer, nn.SgdMomentum):
        for pname, arr in optimizer.velocity.items():
            yield f"opt/velocity/{pname}", arr


def save_checkpoint(model: Model, path: str | os.PathLike, *,
                    optimizer=None, step: int = 0) -> None:
    """Serialize parameters, batchnorm statistics, and optional optimizer
    accumulators."""
    entries = list(_model_arrays(model))
    header = [
        f"version={FORMAT_VERSION}",
        f"step={step}",
        "spec_text=" + model.spec.canonical_text().replace("\n", "\\n"),
        f"spec_hash={spec_hash(model.spec)}",
    ]
    if optimizer is not None:
        header.append(f"optimizer={optimizer.algorithm}")
        header.append(f"optimizer_steps={optimizer.step_count}")
        entries.extend(_optimizer_arrays(optimizer))
    header.append(f"arrays={len(entries)}")
    blobs, offset = [], 0
    for i, (name, arr) in enumerate(entries):
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        shape = ",".join(str(d) for d in arr.shape)
        header.append(f"array.{i}.name={name}")
        header.append(f"array.{i}.shape={shape}")
        header.append(f"array.{i}.offset={offset}")
        blobs.append(blob)
        offset += len(blob)
    header_bytes = ("\n".join(header) + "\n").encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(f"{len(header_bytes)}\n".encode("ascii"))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def read_header(path: str | os.PathLike) -> tuple[dict[str, str], bytes]:
    """Parse and validate the header; returns (fields, data section)."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(MAGIC):
        raise CorruptFile(f"{path}: bad magic")
    rest = raw[len(MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise CorruptFile(f"{path}: missing header length")
    try:
        header_len = int(rest[:nl])
    except ValueError:
        raise CorruptFile(f"{path}: malformed header length") from None
    body = rest[nl + 1:]
    if len(body) < header_len:
        raise CorruptFile(f"{path}: truncated header")
    fields: dict[str, str] = {}
    for line in body[:header_len].decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        fields[key] = value
    if "version" not in fields:
        raise CorruptFile(f"{path}: header lacks a version")
    if int(fields["version"]) != FORMAT_VERSION:
        raise VersionMismatch(
            f"{path}: format version {fields['version']}, expected {FORMAT_VERSION}")
    return fields, body[header_len:]


def _directory(fields: dict[str, str]):
    for i in range(int(fields["arrays"])):
        name = fields[f"array.{i}.name"]
        shape_str = fields[f"array.{i}.shape"]
        shape = tuple(int(d) for d in shape_str.split(",")) if shape_str else ()
        yield name, shape, int(fields[f"array.{i}.offset"])


def _read_array(data: bytes, shape: tuple[int, ...], offset: int,
                path, name: str) -> np.ndarray:
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    end = offset + 4 * count
    if end > len(data):
        raise CorruptFile(f"{path}: array {name!r} overruns the file")
    return np.frombuffer(data[offset:end], dtype="<f4").reshape(shape)


def load_checkpoint(path: str | os.PathLike, expected_spec: ArchSpec, *,
                    allow_head_mismatch: bool = False, seed: int = 0,
                    dtype=np.float32) -> Model:
    """Rebuild a model from a checkpoint, verifying version and spec hash.

    With ``allow_head_mismatch`` the stored spec may differ from
    ``expected_spec`` in ``n_classes`` only (the head is about to be
    replaced); everything else must hash-match.
    """
    fields, data = read_header(path)
    stored_text = fields["spec_text"].replace("\\n", "\n")
    if fnv1a64(stored_text) != int(fields["spec_hash"]):
        raise CorruptFile(f"{path}: spec hash does not match stored spec text")
    stored_spec = parse_spec_text(stored_text)
    expected = expected_spec
    if allow_head_mismatch:
        expected = expected_spec.with_classes(stored_spec.n_classes)
    if spec_hash(expected) != int(fields["spec_hash"]):
        raise SpecHashMismatch(
            f"{path}: checkpoint was built for a different architecture spec")
    model = build_model(stored_spec, seed=seed, dtype=dtype)
    stored = {name: (shape, off) for name, shape, off in _directory(fields)
              if not name.startswith("opt/")}
    expected_arrays = dict(_model_arrays(model))
    missing = expected_arrays.keys() - stored.keys()
    extra = stored.keys() - expected_arrays.keys()
    if missing or extra:
        raise CorruptFile(
            f"{path}: array directory mismatch (missing={sorted(missing)}, "
            f"extra={sorted(extra)})")
    for name, arr in expected_arrays.items():
        shape, off = stored[name]
        if shape != arr.shape:
            raise CorruptFile(f"{path}: array {name!r} has shape {shape}, "
                              f"expected {arr.shape}")
        arr[:] = _read_array(data, shape, off, path, name).astype(dtype)
    return model


def load_step(path: str | os.PathLike) -> int:
    fields, _ = read_header(path)
    return int(fields.get("step", 0))


def freeze_prefix(model: Model, k: int) -> Model:
    """Mark the first k graph layers non-trainable (frozen batchnorm also
    stops updating its running statistics); the rest become trainable."""
    if not 0 <= k <= len(model.nodes):
        raise IndexOutOfRange(
            f"freeze depth {k} outside [0, {len(model.nodes)}]")
    for i, node in enumerate(model.nodes):
        node.layer.trainable = i >= k
    return model


def replace_head(model: Model, n_classes: int, seed: int = 0) -> Model:
    """Swap the dense head for a freshly initialized one with ``n_classes``
    outputs; every other parameter is left byte-identical."""
    from .arch import InvalidSpec

    if n_classes < 2:
        raise InvalidSpec(f"n_classes must be >= 2, got {n_classes}")
    head_node = model.by_name[model.head]
    old = head_node.layer
    if not isinstance(old, nn.Dense):
        raise InvalidSpec("model head is not a dense layer")
    dtype = old.params["w"].dtype
    new_spec = model.spec.with_classes(n_classes)
    rng = seeded_rng(seed, new_spec.variant, "head")
    head_node.layer = nn.Dense(old.in_features, n_classes, rng=rng, dtype=dtype)
    head_node.layer.trainable = old.trainable
    model.spec = new_spec
    return model
