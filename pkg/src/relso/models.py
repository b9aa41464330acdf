"""Transformer encoder, attention-pooling bottleneck, conv decoder and fitness head"""
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from relso import diffcore as dc
from relso.exceptions import ImproperlyConfigured, NumericalError, ShapeError, ValidationError
from relso.seqdata import AMINO_ACIDS, PAD_INDEX, Alphabet

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RLSO"
CHECKPOINT_VERSION = 1

FULL_SCALE = {"n_layers": 10, "n_heads": 4, "d_embed": 300, "d_hidden": 400, "d_latent": 30}
DESK_SCALE = {"n_layers": 2, "n_heads": 2, "d_embed": 32, "d_hidden": 64, "d_latent": 8}
SCALE_PRESETS = {"desk": DESK_SCALE, "full": FULL_SCALE}

ABLATION_PRESETS = {
    "ae": {
        "use_fitness_head": False,
        "use_neg_sampling": False,
        "use_interp": False,
        "alpha": 0.0,
        "latent_norm_weight": 0.0,
        "spectral_weight": 0.0,
    },
    "jtae": {
        "use_fitness_head": True,
        "use_neg_sampling": False,
        "use_interp": False,
        "latent_norm_weight": 0.0,
        "spectral_weight": 0.0,
    },
    "relso-neg": {
        "use_fitness_head": True,
        "use_neg_sampling": True,
        "use_interp": False,
    },
    "relso-interp": {
        "use_fitness_head": True,
        "use_neg_sampling": False,
        "use_interp": True,
        "latent_norm_weight": 0.0,
        "spectral_weight": 0.0,
    },
    "relso": {
        "use_fitness_head": True,
        "use_neg_sampling": True,
        "use_interp": True,
    },
}

SPECTRAL_ITERS = 50
WEIGHT_FIELDS = ("gamma", "alpha", "eta", "interp_weight", "latent_norm_weight", "spectral_weight")


@dataclass
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 2
    d_embed: int = 32
    d_hidden: int = 64
    d_latent: int = 8
    max_len: int = 16
    vocab_size: int = len(AMINO_ACIDS) + 2
    decoder_channels: int = 32
    decoder_layers: int = 4
    decoder_kernel: int = 3
    fitness_hidden: int = 32
    use_fitness_head: bool = True
    use_neg_sampling: bool = True
    use_interp: bool = True
    gamma: float = 1.0
    alpha: float = 1.0
    eta: float = 1.0
    interp_weight: float = 1.0
    latent_norm_weight: float = 1e-3
    spectral_weight: float = 1e-3
    neg_scale: float = 1.2
    neg_samples: int = 32
    interp_fraction: float = 0.5
    interp_k: int = 1
    preset: str = "relso"

    def __post_init__(self):
        if self.d_embed % self.n_heads:
            raise ImproperlyConfigured(
                "d_embed ({}) must be divisible by n_heads ({})".format(self.d_embed, self.n_heads)
            )
        if self.d_latent < 1:
            raise ImproperlyConfigured("d_latent must be at least 1")
        if self.decoder_layers < 1 or self.decoder_kernel % 2 == 0:
            raise ImproperlyConfigured("decoder needs at least one layer and an odd kernel width")
        for name in WEIGHT_FIELDS:
            if getattr(self, name) < 0:
                raise ImproperlyConfigured("loss weight {} must be nonnegative".format(name))
        if self.neg_scale <= 1:
            raise ImproperlyConfigured("neg_scale must exceed 1")
        if not 0 < self.interp_fraction <= 1:
            raise ImproperlyConfigured("interp_fraction must lie in (0, 1]")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ImproperlyConfigured("unknown model config key(s): {}".format(", ".join(sorted(unknown))))
        return cls(**data)


def make_config(preset="relso", scale="desk", **overrides):
    if preset not in ABLATION_PRESETS:
        raise ImproperlyConfigured("unknown preset {!r}; choose from {}".format(preset, ", ".join(ABLATION_PRESETS)))
    if scale not in SCALE_PRESETS:
        raise ImproperlyConfigured("unknown scale {!r}; choose from {}".format(scale, ", ".join(SCALE_PRESETS)))
    values = dict(SCALE_PRESETS[scale])
    values.update(ABLATION_PRESETS[preset])
    values.update(overrides)
    values["preset"] = preset
    return ModelConfig(**values)


def sinusoidal_positions(length, dim):
    position = np.arange(length)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(position * rates)
    table[:, 1::2] = np.cos(position * rates[: dim // 2])
    return table


def power_iteration(weight, u, n_iters=1):
    """Refine the right singular vector ``u`` of ``weight`` (n_in, n_out)

    Returns ``(sigma, u, v)`` with sigma = v^T W u.
    """
    for _ in range(n_iters):
        v = weight @ u
        v = v / max(np.linalg.norm(v), 1e-12)
        u = weight.T @ v
        u = u / max(np.linalg.norm(u), 1e-12)
    return float(v @ weight @ u), u, v


def spectral_norm(weight, n_iters=SPECTRAL_ITERS, seed=0):
    """Largest singular value of a matrix by power iteration"""
    weight = np.asarray(weight, dtype=np.float64)
    u = np.random.default_rng(seed).normal(size=weight.shape[1])
    sigma, _, _ = power_iteration(weight, u / np.linalg.norm(u), n_iters=n_iters)
    return sigma


@dataclass
class EncodeOutput:
    embeddings: dc.Tensor
    pool_weights: dc.Tensor
    z: dc.Tensor
    attention: np.ndarray
    mask: np.ndarray


@dataclass
class Checkpoint:
    config: ModelConfig
    alphabet: str
    params: dict
    buffers: dict = field(default_factory=dict)
    rng_state: dict = None
    step: int = 0
    version: int = CHECKPOINT_VERSION


class ReLSOModel:
    def __init__(self, config, alphabet=None, seed=0):
        self.config = config
        self.alphabet = alphabet or Alphabet(AMINO_ACIDS[: config.vocab_size - 2])
        if len(self.alphabet) != config.vocab_size:
            raise ImproperlyConfigured(
                "alphabet has {} symbols but vocab_size is {}".format(len(self.alphabet), config.vocab_size)
            )
        self.params = dc.ParamStore()
        self.buffers = {}
        self.training = True
        self.positions = sinusoidal_positions(config.max_len, config.d_embed)
        self._build(np.random.default_rng(seed))

    def __repr__(self):
        return "ReLSOModel(preset={}, params={})".format(self.config.preset, len(self.params))

    # construction

    def _linear(self, name, n_in, n_out, rng):
        limit = math.sqrt(6.0 / (n_in + n_out))
        self.params.add(name + ".weight", rng.uniform(-limit, limit, size=(n_in, n_out)))
        self.params.add(name + ".bias", np.zeros(n_out))

    def _norm(self, name, dim):
        self.params.add(name + ".gamma", np.ones(dim))
        self.params.add(name + ".beta", np.zeros(dim))

    def _build(self, rng):
        c = self.config
        self.params.add("embed.weight", rng.normal(0.0, 1.0 / math.sqrt(c.d_embed), size=(c.vocab_size, c.d_embed)))
        for i in range(c.n_layers):
            prefix = "encoder.{}".format(i)
            self._norm(prefix + ".ln1", c.d_embed)
            for proj in ("q", "k", "v", "o"):
                self._linear("{}.attn.{}".format(prefix, proj), c.d_embed, c.d_embed, rng)
            self._norm(prefix + ".ln2", c.d_embed)
            self._linear(prefix + ".ff.in", c.d_embed, c.d_hidden, rng)
            self._linear(prefix + ".ff.out", c.d_hidden, c.d_embed, rng)
        self._norm("encoder.ln", c.d_embed)
        self._linear("pool.score", c.d_embed, 1, rng)
        self._linear("pool.proj.in", c.d_embed, c.d_hidden, rng)
        self._linear("pool.proj.out", c.d_hidden, c.d_latent, rng)

        self._linear("decoder.input", c.d_latent, c.max_len * c.decoder_channels, rng)
        for i in range(c.decoder_layers):
            last = i == c.decoder_layers - 1
            n_out = c.vocab_size if last else c.decoder_channels
            limit = math.sqrt(6.0 / (c.decoder_kernel * (c.decoder_channels + n_out)))
            self.params.add(
                "decoder.conv{}.weight".format(i),
                rng.uniform(-limit, limit, size=(c.decoder_kernel, c.decoder_channels, n_out)),
            )
            self.params.add("decoder.conv{}.bias".format(i), np.zeros(n_out))
            if not last:
                self._norm("decoder.bn{}".format(i), c.decoder_channels)
                self.buffers["decoder.bn{}.running_mean".format(i)] = np.zeros(c.decoder_channels)
                self.buffers["decoder.bn{}.running_var".format(i)] = np.ones(c.decoder_channels)

        self._linear("fitness.in", c.d_latent, c.fitness_hidden, rng)
        self._linear("fitness.out", c.fitness_hidden, 1, rng)
        for name, width in (("fitness.in", c.fitness_hidden), ("fitness.out", 1)):
            u = rng.normal(size=width)
            self.buffers[name + ".u"] = u / np.linalg.norm(u)

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def linear(self, x, name):
        return x @ self.params[name + ".weight"] + self.params[name + ".bias"]

    # encoder

    def _attention(self, h, mask, prefix):
        c = self.config
        batch, length, _ = h.shape
        head_dim = c.d_embed // c.n_heads

        def heads(name):
            x = self.linear(h, "{}.attn.{}".format(prefix, name))
            return x.reshape(batch, length, c.n_heads, head_dim).transpose(0, 2, 1, 3)

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(head_dim))
        weights = dc.softmax(scores, mask=mask[:, None, None, :])
        out = (weights @ v).transpose(0, 2, 1, 3).reshape(batch, length, c.d_embed)
        return self.linear(out, prefix + ".attn.o"), weights.data

    def encode(self, tokens, lengths=None):
        """Map token batches (B, L) to latent points; PAD positions are masked

        ``lengths`` defaults to the count of non-PAD tokens per row.
        """
        c = self.config
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        if tokens.shape[0] == 0:
            raise ShapeError("encode needs a nonempty batch")
        batch, length = tokens.shape
        if length > c.max_len:
            raise ShapeError("sequence length {} exceeds max_len {}".format(length, c.max_len))
        if lengths is None:
            lengths = (tokens != PAD_INDEX).sum(axis=1)
        lengths = np.asarray(lengths, dtype=np.int64)
        if np.any(lengths < 1) or np.any(lengths > length):
            raise ShapeError("every sequence needs between 1 and {} tokens".format(length))
        mask = np.arange(length)[None, :] < lengths[:, None]

        x = dc.embedding(self.params["embed.weight"], tokens) + self.positions[:length]
        attention = []
        for i in range(c.n_layers):
            prefix = "encoder.{}".format(i)
            h = self._layer_norm(x, prefix + ".ln1")
            attended, weights = self._attention(h, mask, prefix)
            attention.append(weights)
            x = x + attended
            h = self._layer_norm(x, prefix + ".ln2")
            x = x + self.linear(dc.relu(self.linear(h, prefix + ".ff.in")), prefix + ".ff.out")
        embeddings = self._layer_norm(x, "encoder.ln")

        scores = self.linear(embeddings, "pool.score").reshape(batch, length)
        pool = dc.softmax(scores, mask=mask)
        projected = self.linear(dc.relu(self.linear(embeddings, "pool.proj.in")), "pool.proj.out")
        z = (projected * pool.reshape(batch, length, 1)).sum(axis=1)
        maps = np.stack(attention, axis=1) if attention else np.zeros((batch, 0, c.n_heads, length, length))
        return EncodeOutput(embeddings=embeddings, pool_weights=pool, z=z, attention=maps, mask=mask)

    def _layer_norm(self, x, name):
        return dc.layer_norm(x, self.params[name + ".gamma"], self.params[name + ".beta"])

    # decoder

    def decode(self, z, update_stats=True):
        """Logits (B, max_len, vocab_size) for latent points (B, d_latent)"""
        c = self.config
        z = z if isinstance(z, dc.Tensor) else dc.Tensor(np.atleast_2d(z))
        if not np.all(np.isfinite(z.data)):
            raise NumericalError("decode received a non-finite latent point")
        batch = z.shape[0]
        h = self.linear(z, "decoder.input").reshape(batch, c.max_len, c.decoder_channels)
        for i in range(c.decoder_layers):
            prefix = "decoder.conv{}".format(i)
            h = dc.conv1d(h, self.params[prefix + ".weight"], self.params[prefix + ".bias"])
            if i < c.decoder_layers - 1:
                bn = "decoder.bn{}".format(i)
                h = dc.batch_norm(
                    dc.relu(h),
                    self.params[bn + ".gamma"],
                    self.params[bn + ".beta"],
                    self.buffers[bn + ".running_mean"],
                    self.buffers[bn + ".running_var"],
                    training=self.training,
                    update_stats=update_stats,
                )
        return h

    def decode_tokens(self, z, lengths=None):
        """Argmax over residue symbols only, PAD beyond each length"""
        with dc.no_grad():
            logits = self.decode(z, update_stats=False).data
        residues = self.alphabet.residue_indices
        tokens = residues[np.argmax(logits[..., residues], axis=-1)]
        if lengths is not None:
            lengths = np.broadcast_to(np.asarray(lengths), (tokens.shape[0],))
            tokens = np.where(np.arange(tokens.shape[1])[None, :] < lengths[:, None], tokens, PAD_INDEX)
        return tokens

    def decode_sequences(self, z, lengths=None):
        return [self.alphabet.decode(row) for row in self.decode_tokens(z, lengths)]

    # fitness head

    def predict_fitness(self, z):
        z = z if isinstance(z, dc.Tensor) else dc.Tensor(np.atleast_2d(z))
        if not np.all(np.isfinite(z.data)):
            raise NumericalError("predict_fitness received a non-finite latent point")
        hidden = dc.softplus(self.linear(z, "fitness.in"))
        return self.linear(hidden, "fitness.out").reshape(z.shape[0])

    def spectral_penalty(self, update=True):
        """Sum of squared spectral-norm estimates of the fitness head weights

        One persistent power-iteration step per call when ``update``.
        """
        total = None
        for name in ("fitness.in", "fitness.out"):
            weight = self.params[name + ".weight"]
            u = self.buffers[name + ".u"]
            if update:
                _, u, v = power_iteration(weight.data, u)
                self.buffers[name + ".u"] = u
            else:
                v = weight.data @ u
                v = v / max(np.linalg.norm(v), 1e-12)
            sigma = dc.Tensor(v[None, :]) @ weight @ dc.Tensor(u[:, None])
            term = (sigma * sigma).sum()
            total = term if total is None else total + term
        return total

    # persistence

    def state(self):
        return self.params.state_dict(), {name: value.copy() for name, value in self.buffers.items()}

    def to_checkpoint(self, rng_state=None, step=0):
        params, buffers = self.state()
        return Checkpoint(
            config=self.config,
            alphabet="".join(self.alphabet.residues),
            params=params,
            buffers=buffers,
            rng_state=rng_state,
            step=step,
        )

    @classmethod
    def from_checkpoint(cls, checkpoint):
        model = cls(checkpoint.config, alphabet=Alphabet(checkpoint.alphabet))
        try:
            model.params.load_state_dict(checkpoint.params)
        except (KeyError, ShapeError) as exc:
            raise ValidationError("checkpoint parameters do not match the model: {}".format(exc.args[0]))
        unknown = sorted(set(checkpoint.buffers) - set(model.buffers))
        missing = sorted(set(model.buffers) - set(checkpoint.buffers))
        if unknown or missing:
            raise ValidationError(
                "checkpoint buffers do not match the model: unknown [{}], missing [{}]".format(
                    ", ".join(unknown), ", ".join(missing)
                )
            )
        for name, value in checkpoint.buffers.items():
            if model.buffers[name].shape != value.shape:
                raise ValidationError("checkpoint buffer {} does not match the model".format(name))
            model.buffers[name] = np.array(value, dtype=np.float64)
        model.eval()
        return model


def save_checkpoint(checkpoint, path):
    if isinstance(checkpoint, ReLSOModel):
        checkpoint = checkpoint.to_checkpoint()
    tensors = list(checkpoint.params.items()) + list(checkpoint.buffers.items())
    header = json.dumps(
        {
            "config": checkpoint.config.to_dict(),
            "alphabet": checkpoint.alphabet,
            "buffers": list(checkpoint.buffers),
            "rng_state": checkpoint.rng_state,
            "step": checkpoint.step,
        },
        sort_keys=True,
    ).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header]
    chunks.append(struct.pack("<I", len(tensors)))
    for name, value in tensors:
        value = np.asarray(value, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", value.ndim) + struct.pack("<{}I".format(value.ndim), *value.shape))
        chunks.append(value.tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))
    logger.debug("saved checkpoint %s (%d tensors)", path, len(tensors))


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.offset = 0

    def take(self, size):
        if self.offset + size > len(self.blob):
            raise ValidationError("truncated checkpoint at byte {}".format(self.offset))
        chunk = self.blob[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_header(header, path):
    if not isinstance(header, dict) or not isinstance(header.get("config"), dict):
        raise ValidationError("checkpoint header in {} has no model config".format(path))
    try:
        config = ModelConfig.from_dict(header["config"])
    except (ImproperlyConfigured, TypeError, ValueError) as exc:
        raise ValidationError("invalid model config in checkpoint {}: {}".format(path, exc))
    alphabet = header.get("alphabet")
    if not isinstance(alphabet, str) or not alphabet or len(set(alphabet)) != len(alphabet):
        raise ValidationError("checkpoint header in {} has an invalid alphabet {!r}".format(path, alphabet))
    return config, alphabet


def load_checkpoint(path):
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    magic = reader.take(len(CHECKPOINT_MAGIC))
    (version,) = reader.unpack("<I")
    if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
        raise ValidationError(
            "unsupported checkpoint version in {} (magic {!r}, version {}; expected {!r} version {})".format(
                path, magic, version, CHECKPOINT_MAGIC, CHECKPOINT_VERSION
            )
        )
    (header_len,) = reader.unpack("<I")
    try:
        header = json.loads(reader.take(header_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ValidationError("corrupted checkpoint header in {}".format(path))

    (count,) = reader.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack("<{}I".format(ndim)) if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(reader.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if reader.offset != len(reader.blob):
        raise ValidationError("trailing bytes after checkpoint payload in {}".format(path))

    config, alphabet = _read_header(header, path)
    buffer_names = set(header.get("buffers", []))
    return Checkpoint(
        config=config,
        alphabet=alphabet,
        params={k: v for k, v in tensors.items() if k not in buffer_names},
        buffers={k: v for k, v in tensors.items() if k in buffer_names},
        rng_state=header.get("rng_state"),
        step=header.get("step", 0),
        version=version,
    )
