"""Full classifier: embeddings, three encoders, and the fused output layer.

The class distribution is softmax(z_G W1 + z_H W2 + h_T W3), where the three
vectors come from the master-node encoder, the hierarchical encoder, and the
clique-tree encoder. Any encoder can be ablated, in which case its term is
simply absent from the sum and its parameters receive zero gradient.

Grid topology and the clique-tree decomposition depend only on the
configured geometry, so they are computed once per (rows, cols) and shared
across images; per-image state is limited to features and messages.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ctenc import CTEncParams, GRUParams, ctenc_forward
from .errors import CheckpointError, ConfigError, DimensionError, EmptyInputError
from .genc import GEncParams, genc_forward
from .graph import EmbeddingParams, PatchGraph, augment_master_node, build_grid_adjacency
from .hgenc import HGEncLayerParams, hgenc_forward
from .imaging import Image, patchify
from .rng import substream
from .treedecomp import CliqueTree, clique_features, decompose

CHECKPOINT_MAGIC = b"EMCNET1"


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    message_rounds: int = 6  # shared by the graph and tree encoders
    pooling_ratio: float = 0.75
    patch_size: int = 32
    image_side: int = 256
    n_classes: int = 10
    channels: int = 3
    hgenc_layers: int = 3
    use_genc: bool = True
    use_hgenc: bool = True
    use_ctenc: bool = True
    strict_tree_sync: bool = False

    def __post_init__(self):
        if self.image_side % self.patch_size:
            raise ConfigError(
                f"image side {self.image_side} not divisible by patch size {self.patch_size}"
            )
        if not (self.use_genc or self.use_hgenc or self.use_ctenc):
            raise ConfigError("at least one encoder must be enabled")
        if self.d < 1 or self.n_classes < 2 or self.message_rounds < 1:
            raise ConfigError("d >= 1, n_classes >= 2 and message_rounds >= 1 required")
        if not 0.0 < self.pooling_ratio <= 1.0:
            raise ConfigError(f"pooling ratio must be in (0, 1], got {self.pooling_ratio}")

    @property
    def grid_rows(self) -> int:
        return self.image_side // self.patch_size

    @property
    def grid_cols(self) -> int:
        return self.image_side // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class GridStructure:
    adjacency: np.ndarray
    tree: CliqueTree  # topology only; features filled per image
    k_max: int


@lru_cache(maxsize=8)
def _grid_structure(rows: int, cols: int) -> GridStructure:
    adjacency = build_grid_adjacency(rows, cols)
    tree, _ = decompose(adjacency)
    return GridStructure(adjacency=adjacency, tree=tree, k_max=tree.max_supernode_size())


def grid_structure(config: ModelConfig) -> GridStructure:
    return _grid_structure(config.grid_rows, config.grid_cols)


@dataclass
class ModelParams:
    embedding: EmbeddingParams
    genc: GEncParams
    hgenc: list[HGEncLayerParams]
    ctenc: CTEncParams
    clique_w: Tensor
    out_w1: Tensor
    out_w2: Tensor
    out_w3: Tensor
    seed: int = 0

    def as_dict(self) -> dict[str, Tensor]:
        named: dict[str, Tensor] = {
            "embedding.patch_projection": self.embedding.patch_projection,
            "embedding.position_table": self.embedding.position_table,
            "genc.W_g": self.genc.W_g,
            "genc.U_g1": self.genc.U_g1,
            "genc.U_g2": self.genc.U_g2,
        }
        for i, layer in enumerate(self.hgenc):
            named[f"hgenc.{i}.W_conv"] = layer.W_conv
            named[f"hgenc.{i}.a_attn"] = layer.a_attn
            named[f"hgenc.{i}.p_vec"] = layer.p_vec
            named[f"hgenc.{i}.W_Q"] = layer.W_Q
            named[f"hgenc.{i}.W_K"] = layer.W_K
            named[f"hgenc.{i}.W_V"] = layer.W_V
        gru = self.ctenc.gru
        named.update(
            {
                "ctenc.W_T1": self.ctenc.W_T1,
                "ctenc.W_T2": self.ctenc.W_T2,
                "ctenc.gru.W_z": gru.W_z,
                "ctenc.gru.U_z": gru.U_z,
                "ctenc.gru.b_z": gru.b_z,
                "ctenc.gru.W_r": gru.W_r,
                "ctenc.gru.U_r": gru.U_r,
                "ctenc.gru.b_r": gru.b_r,
                "ctenc.gru.W": gru.W,
                "ctenc.gru.U": gru.U,
                "clique.W": self.clique_w,
                "output.W1": self.out_w1,
                "output.W2": self.out_w2,
                "output.W3": self.out_w3,
            }
        )
        return named

    def copy(self) -> "ModelParams":
        arrays = {name: t.data.copy() for name, t in self.as_dict().items()}
        clone = _params_skeleton_like(self)
        for name, t in clone.as_dict().items():
            t.data[...] = arrays[name]
        return clone


def _params_skeleton_like(params: ModelParams) -> ModelParams:
    def t(src: Tensor) -> Tensor:
        return Tensor(np.zeros_like(src.data), requires_grad=src.requires_grad)

    return ModelParams(
        embedding=EmbeddingParams(
            patch_projection=t(params.embedding.patch_projection),
            position_table=t(params.embedding.position_table),
        ),
        genc=GEncParams(t(params.genc.W_g), t(params.genc.U_g1), t(params.genc.U_g2)),
        hgenc=[
            HGEncLayerParams(
                t(l.W_conv), t(l.a_attn), t(l.p_vec), t(l.W_Q), t(l.W_K), t(l.W_V)
            )
            for l in params.hgenc
        ],
        ctenc=CTEncParams(
            t(params.ctenc.W_T1),
            t(params.ctenc.W_T2),
            GRUParams(*(t(getattr(params.ctenc.gru, f.name)) for f in dataclasses.fields(GRUParams))),
        ),
        clique_w=t(params.clique_w),
        out_w1=t(params.out_w1),
        out_w2=t(params.out_w2),
        out_w3=t(params.out_w3),
        seed=params.seed,
    )


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Fan-in-scaled uniform initialization; biases start at zero.

    Every matrix entry is drawn from uniform(-1/sqrt(rows), 1/sqrt(rows));
    deterministic for a given seed.
    """
    rng = substream(seed, "init")

    def mat(rows: int, cols: int) -> Tensor:
        bound = 1.0 / np.sqrt(rows)
        return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True)

    def bias(n: int) -> Tensor:
        return Tensor(np.zeros(n), requires_grad=True)

    d = config.d
    k_max = grid_structure(config).k_max
    return ModelParams(
        embedding=EmbeddingParams(
            patch_projection=mat(config.patch_dim, d),
            position_table=mat(config.n_patches, d),
        ),
        genc=GEncParams(W_g=mat(d, d), U_g1=mat(d, d), U_g2=mat(d, d)),
        hgenc=[
            HGEncLayerParams(
                W_conv=mat(d, 2 * d),
                a_attn=mat(4 * d, 1),
                p_vec=mat(2 * d, 1),
                W_Q=mat(2 * d, d),
                W_K=mat(2 * d, d),
                W_V=mat(2 * d, d),
            )
            for _ in range(config.hgenc_layers)
        ],
        ctenc=CTEncParams(
            W_T1=mat(d, d),
            W_T2=mat(d, d),
            gru=GRUParams(
                W_z=mat(d, d), U_z=mat(d, d), b_z=bias(d),
                W_r=mat(d, d), U_r=mat(d, d), b_r=bias(d),
                W=mat(d, d), U=mat(d, d),
            ),
        ),
        clique_w=mat(k_max * d, d),
        out_w1=mat(d, config.n_classes),
        out_w2=mat(d, config.n_classes),
        out_w3=mat(d, config.n_classes),
        seed=seed,
    )


def forward_from_patches(
    flat_patches: np.ndarray,
    params: ModelParams,
    config: ModelConfig,
    pool_trace: list | None = None,
) -> Tensor:
    """Class probabilities (1, n_classes) from pre-flattened patches."""
    structure = grid_structure(config)
    n = config.n_patches
    if flat_patches.shape != (n, config.patch_dim):
        raise DimensionError(
            f"patch matrix {flat_patches.shape} does not match configured "
            f"geometry ({n}, {config.patch_dim})"
        )
    x = ad.add(
        ad.matmul(ad.constant(flat_patches), params.embedding.patch_projection),
        params.embedding.position_table,
    )
    logits: Tensor | None = None
    if config.use_genc:
        g = PatchGraph(n, structure.adjacency, x)
        _, z_g = genc_forward(augment_master_node(g), params.genc, config.message_rounds)
        logits = ad.matmul(z_g, params.out_w1)
    if config.use_hgenc:
        z_h = hgenc_forward(x, structure.adjacency, params.hgenc, config.pooling_ratio, trace=pool_trace)
        term = ad.matmul(z_h, params.out_w2)
        logits = term if logits is None else ad.add(logits, term)
    if config.use_ctenc:
        feats = clique_features(structure.tree, x, params.clique_w)
        tree = dataclasses.replace(structure.tree, features=feats)
        _, h_root = ctenc_forward(tree, params.ctenc, config.message_rounds, config.strict_tree_sync)
        term = ad.matmul(h_root, params.out_w3)
        logits = term if logits is None else ad.add(logits, term)
    return ad.softmax(logits, axis=1)


def emcnet_forward(
    img: Image, params: ModelParams, config: ModelConfig, pool_trace: list | None = None
) -> Tensor:
    """Class probabilities for one image (already sized for the config)."""
    if img.channels != config.channels:
        raise DimensionError(f"expected {config.channels}-channel image, got {img.channels}")
    seq = patchify(img, config.patch_size)
    return forward_from_patches(seq.flat, params, config, pool_trace=pool_trace)


def predict(q) -> int:
    """Most probable class; ties go to the lowest index."""
    values = q.data if isinstance(q, Tensor) else np.asarray(q)
    values = values.reshape(-1)
    if values.size == 0:
        raise EmptyInputError("empty probability vector")
    return int(np.argmax(values))


# ---------------------------------------------------------------------------
# checkpoint io


def save_checkpoint(path: str | Path, params: ModelParams, config: ModelConfig) -> None:
    """Write the parameter container and a JSON config sidecar."""
    path = Path(path)
    named = params.as_dict()
    manifest = {
        "params": [{"name": n, "shape": list(t.shape)} for n, t in named.items()],
        "meta": {
            "d": config.d,
            "n_classes": config.n_classes,
            "k_max": grid_structure(config).k_max,
            "seed": params.seed,
        },
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for t in named.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(f"{path}.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read raw parameter arrays and the manifest metadata."""
    buf = Path(path).read_bytes()
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (manifest_len,) = struct.unpack("<Q", buf[off : off + 8])
    off += 8
    manifest = json.loads(buf[off : off + manifest_len].decode("utf-8"))
    off += manifest_len
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if off + nbytes > len(buf):
            raise CheckpointError(f"{path}: truncated parameter block at {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(buf[off : off + nbytes], dtype="<f8").reshape(shape).copy()
        off += nbytes
    return arrays, manifest["meta"]


def load_model(path: str | Path) -> tuple[ModelParams, ModelConfig]:
    """Rebuild params and config from a checkpoint plus its sidecar."""
    sidecar = Path(f"{path}.json")
    if not sidecar.exists():
        raise CheckpointError(f"missing config sidecar {sidecar}")
    config = ModelConfig.from_dict(json.loads(sidecar.read_text()))
    arrays, meta = load_checkpoint(path)
    for fieldname in ("d", "n_classes", "k_max"):
        expected = {"d": config.d, "n_classes": config.n_classes, "k_max": grid_structure(config).k_max}[fieldname]
        if meta.get(fieldname) != expected:
            raise CheckpointError(
                f"checkpoint/config mismatch on {fieldname}: checkpoint has "
                f"{meta.get(fieldname)}, config implies {expected}"
            )
    params = init_params(config, seed=int(meta.get("seed", 0)))
    named = params.as_dict()
    if set(named) != set(arrays):
        missing = sorted(set(named) ^ set(arrays))
        raise CheckpointError(f"checkpoint parameter names do not match the model: {missing}")
    for name, t in named.items():
        if arrays[name].shape != t.shape:
            raise CheckpointError(
                f"checkpoint/config mismatch on {name}: shape {arrays[name].shape} vs {t.shape}"
            )
        t.data[...] = arrays[name]
    return params, config
