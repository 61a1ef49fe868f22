"""Prompt construction and text conditioning.

Pipeline: template the task labels into prompts, tokenize against a fixed
word vocabulary, run a small frozen transformer, read the feature at the
end-of-sequence token, then optionally refine with a residual adapter whose
scale starts near zero so the frozen encoder's output is preserved at
initialization.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import LayerNorm, Linear, Module, Parameter
from .tensor import Tensor

log = logging.getLogger(__name__)

CLASS_TEMPLATE = "a photo of a {}"

PAD, UNK, EOS = "<pad>", "<unk>", "<eos>"


@dataclass
class PromptSet:
    entries: list

    def __post_init__(self):
        if not self.entries:
            raise ConfigError("PromptSet: entries must be non-empty")

    def __len__(self):
        return len(self.entries)


@dataclass
class ConditioningFeatures:
    """Per-prompt embedding rows: (num_prompts, width) or (batch, num_prompts, width)."""

    features: Tensor
    prompts: object = None

    @property
    def num_prompts(self):
        return self.features.shape[-2]

    @property
    def width(self):
        return self.features.shape[-1]


def build_prompts(names, mode) -> PromptSet:
    """Wrap task labels into prompts.

    semseg and depth use the photo template on class/scene names; refseg
    passes the referring expression through untouched.
    """
    if not names:
        raise ConfigError("build_prompts: empty name list")
    if mode in ("semseg", "depth"):
        if mode == "semseg" and len(set(names)) != len(names):
            raise ConfigError("build_prompts: class names must be unique")
        return PromptSet([CLASS_TEMPLATE.format(n) for n in names])
    if mode == "refseg":
        return PromptSet(list(names))
    raise ConfigError(f"build_prompts: unknown mode {mode!r}")


class Vocab:
    """Whitespace word table with pad/unk/eos specials."""

    def __init__(self, words):
        self.tokens = [PAD, UNK, EOS] + sorted(set(w.lower() for w in words))
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def from_prompt_words(cls, class_names, extra=()):
        words = []
        for name in class_names:
            words.extend(name.lower().split())
        words.extend(CLASS_TEMPLATE.format("").split())
        words.extend(extra)
        return cls(words)

    def save(self, path):
        with open(path, "w") as f:
            f.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            tokens = [line.rstrip("\n") for line in f if line.strip()]
        v = cls.__new__(cls)
        v.tokens = tokens
        v.index = {tok: i for i, tok in enumerate(tokens)}
        return v

    def encode(self, prompt, max_len):
        """Token ids padded to max_len plus the index of the eos position."""
        words = prompt.lower().split()
        if len(words) > max_len - 1:
            log.warning(
                "prompt %r has %d tokens, truncating to %d", prompt, len(words), max_len - 1
            )
            words = words[: max_len - 1]
        ids = [self.index.get(w, self.index[UNK]) for w in words]
        ids.append(self.index[EOS])
        eos_pos = len(ids) - 1
        ids += [self.index[PAD]] * (max_len - len(ids))
        return np.array(ids, dtype=np.int64), eos_pos


class SelfAttention(Module):
    def __init__(self, width, heads, rng):
        if width % heads != 0:
            raise DimensionError(f"SelfAttention: width {width} not divisible by {heads} heads")
        self.heads = heads
        self.to_q = Linear(width, width, rng)
        self.to_k = Linear(width, width, rng)
        self.to_v = Linear(width, width, rng)
        self.proj = Linear(width, width, rng)

    def __call__(self, x, key_mask):
        b, n, d = x.shape
        h = self.heads
        dh = d // h

        def split(t):
            return T.reshape(T.transpose(T.reshape(t, (b, n, h, dh)), (0, 2, 1, 3)), (b * h, n, dh))

        q, k, v = split(self.to_q(x)), split(self.to_k(x)), split(self.to_v(x))
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), dh**-0.5)
        scores = T.reshape(scores, (b, h, n, n))
        scores = T.add(scores, Tensor(key_mask[:, None, None, :]))
        attn = T.softmax(T.reshape(scores, (b * h, n, n)), axis=2)
        out = T.matmul(attn, v)
        out = T.reshape(T.transpose(T.reshape(out, (b, h, n, dh)), (0, 2, 1, 3)), (b, n, d))
        return self.proj(out)


class TransformerBlock(Module):
    def __init__(self, width, heads, rng):
        self.ln1 = LayerNorm(width)
        self.attn = SelfAttention(width, heads, rng)
        self.ln2 = LayerNorm(width)
        self.fc1 = Linear(width, 2 * width, rng)
        self.fc2 = Linear(2 * width, width, rng)

    def __call__(self, x, key_mask):
        x = T.add(x, self.attn(self.ln1(x), key_mask))
        return T.add(x, self.fc2(T.silu(self.fc1(self.ln2(x)))))


class TextEncoder(Module):
    """Toy prompt encoder: word embeddings + 2 transformer blocks + eos readout."""

    def __init__(self, vocab: Vocab, width=64, heads=4, depth=2, max_len=16, rng=None):
        self.vocab = vocab
        self.width = width
        self.max_len = max_len
        self.tok_emb = Parameter(rng.normal((len(vocab), width)) * 0.02)
        self.pos_emb = Parameter(rng.normal((max_len, width)) * 0.02)
        self.blocks = [TransformerBlock(width, heads, rng) for _ in range(depth)]
        self.ln_out = LayerNorm(width)

    def __call__(self, prompts: PromptSet) -> ConditioningFeatures:
        ids = np.zeros((len(prompts), self.max_len), dtype=np.int64)
        eos_positions = np.zeros(len(prompts), dtype=np.int64)
        for i, prompt in enumerate(prompts.entries):
            ids[i], eos_positions[i] = self.vocab.encode(prompt, self.max_len)

        pad_id = self.vocab.index[PAD]
        key_mask = np.where(ids == pad_id, np.float32(-1e9), np.float32(0.0))

        x = T.add(T.embedding(self.tok_emb, ids), self.pos_emb)
        for block in self.blocks:
            x = block(x, key_mask)
        x = self.ln_out(x)
        rows = T.rows_at(x, eos_positions)
        return ConditioningFeatures(features=rows, prompts=prompts)


class TextAdapter(Module):
    """Residual two-layer MLP with a learnable scale, near-identity at init."""

    def __init__(self, width, rng, gamma_init=1e-4):
        self.fc1 = Linear(width, width, rng)
        self.fc2 = Linear(width, width, rng)
        self.gamma = Parameter(np.full(1, gamma_init, dtype=np.float32))

    def __call__(self, cond: ConditioningFeatures) -> ConditioningFeatures:
        x = cond.features
        if x.shape[-1] != self.fc1.weight.shape[0]:
            raise DimensionError(
                f"adapter: feature width {x.shape[-1]} != adapter width "
                f"{self.fc1.weight.shape[0]}"
            )
        refined = T.add(x, T.mul(self.fc2(T.silu(self.fc1(x))), self.gamma))
        return ConditioningFeatures(features=refined, prompts=cond.prompts)
