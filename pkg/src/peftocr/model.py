"""Small ViT-style encoder / autoregressive decoder OCR transformer.

Parameters live in a flat ``name -> float64 array`` dict.  Attention
projection sites may carry a LoRA or DoRA adapter; forward passes first build
the effective dense weights, backward passes produce dense gradients which
are then chained into whatever is trainable (base tensors or adapter
factors).

Layer layout (post-norm, as in the original encoder-decoder transformer)::

    encoder:  x = LN1(x + SelfAttn(x));  x = LN2(x + FFN(x))
    decoder:  y = LN1(y + CausalSelfAttn(y));  y = LN2(y + CrossAttn(y, memory));
              y = LN3(y + FFN(y))
    logits = y @ proj.w + proj.b
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L
from .adapters import (
    DoraState,
    LowRankPair,
    adapter_gradients,
    dora_init,
    effective_weight,
    lora_init,
    merge_adapter,
)
from .data import TokenSequence, Vocabulary
from .errors import (
    AdapterStateError,
    ConfigurationError,
    DimensionError,
    EmptyLossError,
    VocabularyError,
)

STRATEGIES = ("full_ft", "frozen", "lora", "dora")
ADAPTER_KINDS = ("lora", "dora")
PAD, BOS, EOS = Vocabulary.PAD, Vocabulary.BOS, Vocabulary.EOS


@dataclass(frozen=True)
class ModelConfig:
    image_height: int = 32
    image_width: int = 200
    channels: int = 1
    patch_size: int = 8
    embed_dim: int = 32
    head_count: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    ffn_dim: int = 128
    vocab_size: int = len(Vocabulary())
    max_decode_len: int = 9
    activation: str = "relu"

    def __post_init__(self) -> None:
        for name in ("image_height", "image_width", "channels", "patch_size", "embed_dim", "head_count",
                     "encoder_layers", "decoder_layers", "ffn_dim", "vocab_size", "max_decode_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be a positive integer")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigurationError(
                f"image {self.image_height}x{self.image_width} is not divisible by patch size {self.patch_size}"
            )
        if self.embed_dim % self.head_count:
            raise ConfigurationError(f"embed_dim {self.embed_dim} is not divisible by head_count {self.head_count}")
        if self.activation not in ("relu", "swish"):
            raise ConfigurationError(f"activation must be relu or swish, got {self.activation!r}")
        if self.vocab_size <= EOS:
            raise ConfigurationError("vocab_size must leave room for PAD/BOS/EOS")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.head_count

    @property
    def patch_count(self) -> int:
        return (self.image_height // self.patch_size) * (self.image_width // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------- patches


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """``(C,H,W)`` -> ``(N, C*P*P)`` or ``(B,C,H,W)`` -> ``(B, N, C*P*P)``.

    Patches are ordered row-major over the patch grid; each vector is the
    patch's ``(C, P, P)`` block flattened.
    """
    single = images.ndim == 3
    x = images[None] if single else images
    if x.ndim != 4:
        raise DimensionError(f"expected (C,H,W) or (B,C,H,W), got shape {images.shape}")
    b, c, h, w = x.shape
    p = patch_size
    if h % p or w % p:
        raise ConfigurationError(f"image {h}x{w} is not divisible by patch size {p}")
    out = x.reshape(b, c, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5).reshape(b, (h // p) * (w // p), c * p * p)
    return out[0] if single else out


def unpatchify(patches: np.ndarray, patch_size: int, channels: int, height: int, width: int) -> np.ndarray:
    single = patches.ndim == 2
    x = patches[None] if single else patches
    p = patch_size
    b = x.shape[0]
    out = x.reshape(b, height // p, width // p, channels, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(
        b, channels, height, width
    )
    return out[0] if single else out


def images_to_input(images: np.ndarray) -> np.ndarray:
    """uint8 ``(B,H,W)`` graymaps -> float ``(B,1,H,W)`` in [0, 1]."""
    return (np.asarray(images, dtype=np.float64) / 255.0)[:, None]


# --------------------------------------------------------------------- model


def _component(name: str) -> str:
    return "encoder" if name.startswith(("patch.", "enc.")) else "decoder"


def attention_sites(cfg: ModelConfig, component: str, *, include_vocab_projection: bool = False) -> list[str]:
    """Adapter sites: encoder q/k/v per layer; decoder self and cross q/k/v/o per layer."""
    if component == "encoder":
        return [f"enc.{i}.attn.{p}.w" for i in range(cfg.encoder_layers) for p in "qkv"]
    sites = [f"dec.{i}.{blk}.{p}.w" for i in range(cfg.decoder_layers) for blk in ("self", "cross") for p in "qkvo"]
    if include_vocab_projection:
        sites.append("proj.w")
    return sites


@dataclass
class OcrModel:
    config: ModelConfig
    params: dict[str, np.ndarray]
    adapters: dict[str, LowRankPair | DoraState] = field(default_factory=dict)
    strategy: dict[str, str] = field(default_factory=lambda: {"encoder": "full_ft", "decoder": "full_ft"})
    injected: bool = False
    merged_sites: list[str] = field(default_factory=list)

    # ------------------------------------------------------------ construction

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "OcrModel":
        rng = np.random.default_rng(seed)
        d, f, v = config.embed_dim, config.ffn_dim, config.vocab_size
        p: dict[str, np.ndarray] = {}

        def dense(name: str, fan_in: int, fan_out: int) -> None:
            p[name + ".w"] = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
            p[name + ".b"] = np.zeros(fan_out)

        def norm(name: str) -> None:
            p[name + ".g"] = np.ones(d)
            p[name + ".b"] = np.zeros(d)

        dense("patch", config.patch_dim, d)
        p["enc.pos"] = 0.1 * rng.standard_normal((config.patch_count, d))
        for i in range(config.encoder_layers):
            for proj in "qkvo":
                dense(f"enc.{i}.attn.{proj}", d, d)
            norm(f"enc.{i}.ln1")
            dense(f"enc.{i}.ffn.1", d, f)
            dense(f"enc.{i}.ffn.2", f, d)
            norm(f"enc.{i}.ln2")
        p["dec.emb"] = 0.1 * rng.standard_normal((v, d))
        p["dec.pos"] = 0.1 * rng.standard_normal((config.max_decode_len, d))
        for i in range(config.decoder_layers):
            for blk in ("self", "cross"):
                for proj in "qkvo":
                    dense(f"dec.{i}.{blk}.{proj}", d, d)
            norm(f"dec.{i}.ln1")
            norm(f"dec.{i}.ln2")
            dense(f"dec.{i}.ffn.1", d, f)
            dense(f"dec.{i}.ffn.2", f, d)
            norm(f"dec.{i}.ln3")
        dense("proj", d, v)
        return cls(config, p)

    def copy(self) -> "OcrModel":
        from copy import deepcopy

        return deepcopy(self)

    # -------------------------------------------------------------- adapters

    def site_kind(self, site: str) -> str:
        adapter = self.adapters.get(site)
        if adapter is None:
            return "plain"
        return "dora" if isinstance(adapter, DoraState) else "lora"

    def effective_weights(self) -> dict[str, np.ndarray]:
        w = dict(self.params)
        for site, adapter in self.adapters.items():
            w[site] = effective_weight(self.params[site], adapter)
        return w

    def is_trainable(self, name: str) -> bool:
        """Whether a base parameter is updated by training."""
        return self.strategy[_component(name)] == "full_ft"

    def trainable_arrays(self) -> dict[str, np.ndarray]:
        """Name -> live array for every trainable tensor (updated in place by the optimiser)."""
        out = {name: arr for name, arr in self.params.items() if self.is_trainable(name)}
        for site, adapter in self.adapters.items():
            pair = adapter.delta if isinstance(adapter, DoraState) else adapter
            out[f"{site}#A"] = pair.a_matrix
            out[f"{site}#B"] = pair.b_matrix
            if isinstance(adapter, DoraState) and adapter.magnitude_trainable:
                out[f"{site}#magnitude"] = adapter.magnitude
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every tensor that defines the model, including adapter state."""
        out = dict(self.params)
        for site, adapter in self.adapters.items():
            pair = adapter.delta if isinstance(adapter, DoraState) else adapter
            out[f"{site}#A"] = pair.a_matrix
            out[f"{site}#B"] = pair.b_matrix
            if isinstance(adapter, DoraState):
                out[f"{site}#magnitude"] = adapter.magnitude
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, arr in self.state_arrays().items():
            arr[...] = snap[name]

    def base_checksum(self) -> str:
        """SHA-256 over every base (non-adapter) tensor, in name order."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()

    # ---------------------------------------------------------------- forward

    def _attn(self, w: dict, prefix: str) -> L.AttentionWeights:
        return L.AttentionWeights(*(w[f"{prefix}.{p}.{k}"] for p in "qkvo" for k in "wb"))

    def _check_images(self, x: np.ndarray) -> np.ndarray:
        cfg = self.config
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != (cfg.channels, cfg.image_height, cfg.image_width):
            raise DimensionError(
                f"image shape {x.shape[1:]} does not match config "
                f"{(cfg.channels, cfg.image_height, cfg.image_width)}"
            )
        return x

    def _encode(self, w: dict, patches: np.ndarray):
        cfg = self.config
        x = patches @ w["patch.w"] + w["patch.b"] + w["enc.pos"]
        caches = []
        for i in range(cfg.encoder_layers):
            a, ac = L.attention_forward(x, x, x, self._attn(w, f"enc.{i}.attn"), cfg.head_count)
            h, c1 = L.layer_norm_forward(x + a, w[f"enc.{i}.ln1.g"], w[f"enc.{i}.ln1.b"])
            f, fc = L.ffn_forward(h, w[f"enc.{i}.ffn.1.w"], w[f"enc.{i}.ffn.1.b"], w[f"enc.{i}.ffn.2.w"],
                                  w[f"enc.{i}.ffn.2.b"], cfg.activation)
            x, c2 = L.layer_norm_forward(h + f, w[f"enc.{i}.ln2.g"], w[f"enc.{i}.ln2.b"])
            caches.append((ac, c1, fc, c2))
        return x, (patches, caches)

    def _encode_backward(self, w: dict, dmem: np.ndarray, cache, grads: dict) -> None:
        patches, caches = cache
        dx = dmem
        for i in reversed(range(self.config.encoder_layers)):
            ac, c1, fc, c2 = caches[i]
            dres, grads[f"enc.{i}.ln2.g"], grads[f"enc.{i}.ln2.b"] = L.layer_norm_backward(dx, c2)
            dh, fg = L.ffn_backward(dres, fc)
            dh = dh + dres
            for k, g in fg.items():
                grads[f"enc.{i}.ffn.{k[1]}.{k[0]}"] = g
            dres, grads[f"enc.{i}.ln1.g"], grads[f"enc.{i}.ln1.b"] = L.layer_norm_backward(dh, c1)
            dq, dk, dv, ag = L.attention_backward(dres, ac)
            dx = dres + dq + dk + dv
            for k, g in ag.items():
                grads[f"enc.{i}.attn.{k[1]}.{k[0]}"] = g
        grads["enc.pos"] = dx.sum(axis=0)
        _, grads["patch.w"], grads["patch.b"] = L.linear_backward(dx, patches, w["patch.w"], need_dx=False)

    def _decode(self, w: dict, tokens: np.ndarray, memory: np.ndarray):
        cfg = self.config
        t = tokens.shape[1]
        if t > cfg.max_decode_len:
            raise DimensionError(f"token sequence of length {t} exceeds max_decode_len={cfg.max_decode_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise VocabularyError(f"token ids must lie in [0, {cfg.vocab_size})")
        mask = L.causal_mask(t)[None, None] & (tokens != PAD)[:, None, None, :]
        mask[..., 0] = True  # position 0 always visible so no row is empty
        y = w["dec.emb"][tokens] + w["dec.pos"][:t]
        caches = []
        for i in range(cfg.decoder_layers):
            s, sc = L.attention_forward(y, y, y, self._attn(w, f"dec.{i}.self"), cfg.head_count, mask)
            h1, c1 = L.layer_norm_forward(y + s, w[f"dec.{i}.ln1.g"], w[f"dec.{i}.ln1.b"])
            c, cc = L.attention_forward(h1, memory, memory, self._attn(w, f"dec.{i}.cross"), cfg.head_count)
            h2, c2 = L.layer_norm_forward(h1 + c, w[f"dec.{i}.ln2.g"], w[f"dec.{i}.ln2.b"])
            f, fc = L.ffn_forward(h2, w[f"dec.{i}.ffn.1.w"], w[f"dec.{i}.ffn.1.b"], w[f"dec.{i}.ffn.2.w"],
                                  w[f"dec.{i}.ffn.2.b"], cfg.activation)
            y, c3 = L.layer_norm_forward(h2 + f, w[f"dec.{i}.ln3.g"], w[f"dec.{i}.ln3.b"])
            caches.append((sc, c1, cc, c2, fc, c3))
        logits = y @ w["proj.w"] + w["proj.b"]
        return logits, (tokens, y, caches)

    def _decode_backward(self, w: dict, dlogits: np.ndarray, cache, grads: dict) -> np.ndarray:
        tokens, y_out, caches = cache
        dy, grads["proj.w"], grads["proj.b"] = L.linear_backward(dlogits, y_out, w["proj.w"])
        dmem = 0.0
        for i in reversed(range(self.config.decoder_layers)):
            sc, c1, cc, c2, fc, c3 = caches[i]
            dres, grads[f"dec.{i}.ln3.g"], grads[f"dec.{i}.ln3.b"] = L.layer_norm_backward(dy, c3)
            dh2, fg = L.ffn_backward(dres, fc)
            dh2 = dh2 + dres
            for k, g in fg.items():
                grads[f"dec.{i}.ffn.{k[1]}.{k[0]}"] = g
            dres, grads[f"dec.{i}.ln2.g"], grads[f"dec.{i}.ln2.b"] = L.layer_norm_backward(dh2, c2)
            dq, dk, dv, ag = L.attention_backward(dres, cc)
            dmem = dmem + dk + dv
            dh1 = dres + dq
            for k, g in ag.items():
                grads[f"dec.{i}.cross.{k[1]}.{k[0]}"] = g
            dres, grads[f"dec.{i}.ln1.g"], grads[f"dec.{i}.ln1.b"] = L.layer_norm_backward(dh1, c1)
            dq, dk, dv, ag = L.attention_backward(dres, sc)
            dy = dres + dq + dk + dv
            for k, g in ag.items():
                grads[f"dec.{i}.self.{k[1]}.{k[0]}"] = g
        grads["dec.pos"] = np.zeros_like(w["dec.pos"])
        grads["dec.pos"][: tokens.shape[1]] = dy.sum(axis=0)
        demb = np.zeros_like(w["dec.emb"])
        np.add.at(demb, tokens.reshape(-1), dy.reshape(-1, dy.shape[-1]))
        grads["dec.emb"] = demb
        return dmem

    def encode(self, images: np.ndarray, weights: dict | None = None) -> np.ndarray:
        w = weights if weights is not None else self.effective_weights()
        x = self._check_images(np.asarray(images, dtype=np.float64))
        return self._encode(w, patchify(x, self.config.patch_size))[0]

    def decode(self, tokens: np.ndarray, memory: np.ndarray, weights: dict | None = None) -> np.ndarray:
        w = weights if weights is not None else self.effective_weights()
        tokens = np.asarray(tokens, dtype=np.int64)
        single = tokens.ndim == 1
        if single:
            tokens, memory = tokens[None], memory[None] if memory.ndim == 2 else memory
        logits = self._decode(w, tokens, memory)[0]
        return logits[0] if single else logits

    # ---------------------------------------------------------------- training

    def loss_and_grads(self, patches: np.ndarray, tokens_in: np.ndarray, tokens_out: np.ndarray):
        """Mean NLL over non-PAD targets and gradients for every trainable tensor."""
        w = self.effective_weights()
        mem, ecache = self._encode(w, patches)
        logits, dcache = self._decode(w, tokens_in, mem)
        loss, dlogits = nll_loss_and_grad(logits, tokens_out)

        trainable = self.trainable_arrays()
        need_encoder = any(_component(n.split("#")[0]) == "encoder" for n in trainable)
        dense: dict[str, np.ndarray] = {}
        dmem = self._decode_backward(w, dlogits, dcache, dense)
        if need_encoder:
            self._encode_backward(w, dmem, ecache, dense)

        grads: dict[str, np.ndarray] = {}
        for name in trainable:
            if "#" not in name:
                grads[name] = dense[name]
        for site, adapter in self.adapters.items():
            ag = adapter_gradients(adapter, dense[site])
            grads[f"{site}#A"] = ag.grad_a
            grads[f"{site}#B"] = ag.grad_b
            if ag.grad_magnitude is not None:
                grads[f"{site}#magnitude"] = ag.grad_magnitude
        return loss, grads

    def loss(self, patches: np.ndarray, tokens_in: np.ndarray, tokens_out: np.ndarray) -> float:
        w = self.effective_weights()
        mem, _ = self._encode(w, patches)
        logits, _ = self._decode(w, tokens_in, mem)
        return nll_loss(logits, tokens_out)


# ------------------------------------------------------------------- loss


def _valid_targets(logits: np.ndarray, targets) -> tuple[np.ndarray, np.ndarray]:
    ids = np.asarray(targets.ids if isinstance(targets, TokenSequence) else targets, dtype=np.int64)
    if ids.shape != logits.shape[:-1]:
        raise DimensionError(f"targets {ids.shape} do not match logits {logits.shape[:-1]}")
    valid = ids != PAD
    if not valid.any():
        raise EmptyLossError("every target position is padding")
    return ids, valid


def nll_loss(logits: np.ndarray, targets) -> float:
    """Mean of -log softmax(logits)[target] over non-PAD positions."""
    ids, valid = _valid_targets(logits, targets)
    logp = L.log_softmax(logits)
    picked = np.take_along_axis(logp, ids[..., None], axis=-1)[..., 0]
    return float(-(picked * valid).sum() / valid.sum())


def nll_loss_and_grad(logits: np.ndarray, targets) -> tuple[float, np.ndarray]:
    ids, valid = _valid_targets(logits, targets)
    logp = L.log_softmax(logits)
    picked = np.take_along_axis(logp, ids[..., None], axis=-1)[..., 0]
    count = valid.sum()
    loss = float(-(picked * valid).sum() / count)
    grad = np.exp(logp)
    np.put_along_axis(grad, ids[..., None], np.take_along_axis(grad, ids[..., None], axis=-1) - 1.0, axis=-1)
    grad *= (valid / count)[..., None]
    return loss, grad


# ------------------------------------------------------------------ generate


def generate(model: OcrModel, images: np.ndarray, max_len: int | None = None,
             weights: dict | None = None) -> list[TokenSequence]:
    """Greedy decoding from BOS for a batch of ``(C,H,W)`` images.

    Each result holds the emitted tokens up to (not including) EOS, with
    ``truncated`` set when ``max_len`` tokens were produced without an EOS.
    ``argmax`` breaks ties towards the lowest token id.
    """
    cfg = model.config
    max_len = cfg.max_decode_len if max_len is None else max_len
    if max_len > cfg.max_decode_len:
        raise DimensionError(f"max_len {max_len} exceeds max_decode_len {cfg.max_decode_len}")
    w = weights if weights is not None else model.effective_weights()
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    mem = model.encode(images, w)
    b = mem.shape[0]
    tokens = np.full((b, 1), BOS, dtype=np.int64)
    out: list[list[int]] = [[] for _ in range(b)]
    done = np.zeros(b, dtype=bool)
    for step in range(max_len):
        logits = model._decode(w, tokens, mem)[0][:, -1]
        nxt = logits.argmax(axis=-1)
        for i in np.flatnonzero(~done):
            if nxt[i] == EOS:
                done[i] = True
            else:
                out[i].append(int(nxt[i]))
        if done.all() or step == max_len - 1:
            break
        tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
    return [TokenSequence(tuple(seq), truncated=not fin) for seq, fin in zip(out, done)]


# ---------------------------------------------------------------- injection


def inject_adapters(model: OcrModel, encoder: str, decoder: str, rank: int | None = None,
                    scale: float = 1.0, seed: int = 0, magnitude_trainable: bool = False,
                    adapt_vocab_projection: bool = False) -> dict[str, str]:
    """Apply a per-component strategy; returns ``site -> kind`` for wrapped sites.

    ``full_ft`` trains every tensor of the component, ``frozen`` none, and
    ``lora``/``dora`` freeze the component's base tensors and wrap its
    attention sites.
    """
    if model.injected:
        raise AdapterStateError("adapters have already been injected into this model")
    for comp, strat in (("encoder", encoder), ("decoder", decoder)):
        if strat not in STRATEGIES:
            raise ConfigurationError(f"unknown {comp} strategy {strat!r}; choose from {STRATEGIES}")
    if (encoder in ADAPTER_KINDS or decoder in ADAPTER_KINDS) and rank is None:
        raise ConfigurationError("rank is required for lora/dora strategies")

    inventory: dict[str, str] = {}
    cfg = model.config
    k = 0
    for comp, strat in (("encoder", encoder), ("decoder", decoder)):
        if strat not in ADAPTER_KINDS:
            continue
        for site in attention_sites(cfg, comp, include_vocab_projection=adapt_vocab_projection and comp == "decoder"):
            base = model.params[site]
            site_seed = seed * 1_000_003 + k
            k += 1
            if strat == "lora":
                m, n = base.shape
                model.adapters[site] = lora_init(m, n, rank, scale, site_seed)
            else:
                model.adapters[site] = dora_init(base, rank, site_seed, magnitude_trainable, scale)
            inventory[site] = strat
    model.strategy = {"encoder": encoder, "decoder": decoder}
    model.injected = True
    return inventory


def count_parameters(model: OcrModel) -> dict[str, float]:
    """Exact trainable/total scalar counts; ratio is ``100 * trainable / total``."""
    total = sum(a.size for a in model.state_arrays().values())
    trainable = sum(a.size for a in model.trainable_arrays().values())
    return {"trainable": trainable, "total": total, "ratio_percent": 100.0 * trainable / total}


def merge_all(model: OcrModel) -> OcrModel:
    """Fold every adapter into its base weight, in place."""
    for site in list(model.adapters):
        adapter = model.adapters[site]
        model.params[site] = merge_adapter(model.params[site], adapter)
        del model.adapters[site]
        model.merged_sites.append(site)
    return model
