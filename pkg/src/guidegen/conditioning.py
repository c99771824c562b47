"""Prompt encoding, knowledge injection, and cross-attention guidance.

The pretrained clinical text encoder is out of scope here; its stand-in is
a closed-vocabulary trainable embedding with one self-attention block, so
the whole conditioning path trains end-to-end. Learnable generation
queries attend over the encoded prompt through transformer decoder blocks
to produce a task response, which per-layer affine maps expand into
layer-wise guidance for the diffusion backbones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from guidegen import autodiff as ad
from guidegen import layers as nn

__all__ = [
    "PromptRecord",
    "PromptVocabulary",
    "DEFAULT_PROMPT_CONFIG",
    "render_prompt",
    "PromptConditioner",
    "cross_attend",
]

DEFAULT_PROMPT_CONFIG = {
    "age_groups": ["20s", "30s", "40s", "50s", "60s", "70s", "80s"],
    "genders": ["female", "male"],
    "races": ["asian", "black", "white", "other"],
    "sites": ["liver", "spleen"],
    "max_tokens": 40,
    "templates": {
        "base": (
            "the patient is a {race} {gender} in their {age} . in this imaging , "
            "the patient 's condition is described as {clinical} ."
        ),
        "no_tumor": "no visible tumor",
        "tumor_clause": "{count} {tumor_word} located in {sites}",
        "tumor_words": ["tumor", "tumors"],
        "count_words": ["zero", "one", "two", "three", "four"],
        "site_join": " and ",
    },
}


@dataclass(frozen=True)
class PromptRecord:
    """Structured demographics and clinical fields; the only external
    condition at inference time."""

    age_group: str
    gender: str
    race: str
    tumor_present: bool
    tumor_count: int
    tumor_locations: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "tumor_locations", tuple(self.tumor_locations))
        if self.tumor_count != len(self.tumor_locations):
            raise ValueError(
                f"tumor_count {self.tumor_count} != len(locations) {len(self.tumor_locations)}"
            )
        if self.tumor_present != (self.tumor_count > 0):
            raise ValueError("tumor_present inconsistent with tumor_count")

    def to_json(self) -> dict:
        return {
            "age_group": self.age_group,
            "gender": self.gender,
            "race": self.race,
            "tumor_present": self.tumor_present,
            "tumor_count": self.tumor_count,
            "tumor_locations": list(self.tumor_locations),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PromptRecord":
        return cls(
            age_group=obj["age_group"],
            gender=obj["gender"],
            race=obj["race"],
            tumor_present=bool(obj["tumor_present"]),
            tumor_count=int(obj["tumor_count"]),
            tumor_locations=tuple(obj.get("tumor_locations", ())),
        )


def render_prompt(record: PromptRecord, prompt_config: dict) -> str:
    """Deterministic template rendering of a record into one sentence."""
    t = prompt_config["templates"]
    for value, pool, what in (
        (record.age_group, prompt_config["age_groups"], "age group"),
        (record.gender, prompt_config["genders"], "gender"),
        (record.race, prompt_config["races"], "race"),
    ):
        if value not in pool:
            raise ValueError(f"{what} {value!r} not in configured vocabulary")
    for site in record.tumor_locations:
        if site not in prompt_config["sites"]:
            raise ValueError(f"tumor site {site!r} not in configured vocabulary")
    if not record.tumor_present:
        clinical = t["no_tumor"]
    else:
        count_words = t["count_words"]
        if record.tumor_count >= len(count_words):
            raise ValueError(f"no count word configured for {record.tumor_count}")
        word = t["tumor_words"][0 if record.tumor_count == 1 else 1]
        clinical = t["tumor_clause"].format(
            count=count_words[record.tumor_count],
            tumor_word=word,
            sites=t["site_join"].join(record.tumor_locations),
        )
    return t["base"].format(
        race=record.race, gender=record.gender, age=record.age_group, clinical=clinical
    )


class PromptVocabulary:
    """Closed token vocabulary derived from the template tables.

    Token id 0 is reserved for padding; remaining ids are assigned in
    sorted order so the mapping is stable across runs.
    """

    PAD = "<pad>"

    def __init__(self, prompt_config: dict):
        self.config = prompt_config
        self.max_tokens = int(prompt_config["max_tokens"])
        t = prompt_config["templates"]
        words: set[str] = set()
        static = [t["base"], t["no_tumor"], t["tumor_clause"], t["site_join"]]
        for text in static:
            for tok in text.split():
                if not (tok.startswith("{") and tok.endswith("}")):
                    words.add(tok)
        for pool in ("age_groups", "genders", "races", "sites"):
            words.update(prompt_config[pool])
        words.update(t["count_words"])
        words.update(t["tumor_words"])
        self.tokens = [self.PAD] + sorted(words)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def tokenize(self, text: str) -> np.ndarray:
        ids = []
        for tok in text.split():
            if tok not in self.index:
                raise KeyError(f"token {tok!r} missing from vocabulary (config drift?)")
            ids.append(self.index[tok])
        if len(ids) > self.max_tokens:
            raise ValueError(f"prompt has {len(ids)} tokens, max is {self.max_tokens}")
        ids.extend([0] * (self.max_tokens - len(ids)))
        return np.asarray(ids, dtype=np.int64)


def render_and_tokenize(record: PromptRecord, vocab: PromptVocabulary) -> np.ndarray:
    return vocab.tokenize(render_prompt(record, vocab.config))


def cross_attend(params, name, z_prev, r_layer, context_dim, residual=True):
    """Guidance block applied to a feature volume.

    z_prev: Tensor [C, h, w, d]; r_layer: Tensor [N_q, C_ctx]. Tokens are
    the feature volume's voxels; they attend to the per-layer response
    rows, pass through LayerNorm and an MLP, and (unless disabled) add a
    residual back onto the input features.
    """
    c = z_prev.shape[0]
    spatial = z_prev.shape[1:]
    tokens = ad.transpose(ad.reshape(z_prev, (c, int(np.prod(spatial)))))  # [V, C]
    h, _ = nn.attention(params, f"{name}.attn", tokens, r_layer, context_dim)
    h = nn.layer_norm(params, f"{name}.norm", h)
    h = nn.linear(params, f"{name}.mlp1", h)
    h = ad.silu(h)
    h = nn.linear(params, f"{name}.mlp2", h)
    if residual:
        h = ad.add(h, tokens)
    return ad.reshape(ad.transpose(h), (c,) + tuple(spatial))


def add_cross_attend(params, name, c_features, response_dim, context_dim, rng):
    nn.add_linear(params, f"{name}.attn.q", c_features, context_dim, rng)
    nn.add_linear(params, f"{name}.attn.k", response_dim, context_dim, rng)
    nn.add_linear(params, f"{name}.attn.v", response_dim, context_dim, rng)
    nn.add_norm(params, f"{name}.norm", context_dim)
    nn.add_linear(params, f"{name}.mlp1", context_dim, 2 * context_dim, rng)
    nn.add_linear(params, f"{name}.mlp2", 2 * context_dim, c_features, rng)


class PromptConditioner:
    """Trainable prompt pathway for one generative stage.

    Owns the embedding surrogate, the generation queries, the decoder
    blocks, and the per-layer response projections. Each diffusion stage
    instantiates its own conditioner; no weights are shared.
    """

    def __init__(self, prompt_config=None, n_queries=8, query_dim=16, text_dim=16,
                 n_blocks=2, n_layers=2, seed=0, name="cond", params=None):
        self.vocab = PromptVocabulary(prompt_config or DEFAULT_PROMPT_CONFIG)
        self.n_queries = int(n_queries)
        self.query_dim = int(query_dim)
        self.text_dim = int(text_dim)
        self.n_blocks = int(n_blocks)
        self.n_layers = int(n_layers)
        self.name = name
        self.params: dict[str, ad.Parameter] = params if params is not None else {}
        rng = np.random.default_rng(seed)
        p, d_t, d_q = self.params, self.text_dim, self.query_dim
        nn.add_param(p, f"{name}.embed.table",
                     0.1 * rng.standard_normal((len(self.vocab), d_t)))
        nn.add_param(p, f"{name}.embed.pos",
                     0.1 * rng.standard_normal((self.vocab.max_tokens, d_t)))
        nn.add_norm(p, f"{name}.enc.norm1", d_t)
        nn.add_linear(p, f"{name}.enc.attn.q", d_t, d_t, rng)
        nn.add_linear(p, f"{name}.enc.attn.k", d_t, d_t, rng)
        nn.add_linear(p, f"{name}.enc.attn.v", d_t, d_t, rng)
        nn.add_linear(p, f"{name}.enc.attn.o", d_t, d_t, rng, zero=True)
        nn.add_norm(p, f"{name}.enc.norm2", d_t)
        nn.add_linear(p, f"{name}.enc.ff1", d_t, 2 * d_t, rng)
        nn.add_linear(p, f"{name}.enc.ff2", 2 * d_t, d_t, rng, zero=True)
        nn.add_param(p, f"{name}.queries", 0.5 * rng.standard_normal((self.n_queries, d_q)))
        for i in range(self.n_blocks):
            blk = f"{name}.block{i}"
            nn.add_norm(p, f"{blk}.norm1", d_q)
            nn.add_linear(p, f"{blk}.self.q", d_q, d_q, rng)
            nn.add_linear(p, f"{blk}.self.k", d_q, d_q, rng)
            nn.add_linear(p, f"{blk}.self.v", d_q, d_q, rng)
            nn.add_linear(p, f"{blk}.self.o", d_q, d_q, rng)
            nn.add_norm(p, f"{blk}.norm2", d_q)
            nn.add_linear(p, f"{blk}.cross.q", d_q, d_q, rng)
            nn.add_linear(p, f"{blk}.cross.k", d_t, d_q, rng)
            nn.add_linear(p, f"{blk}.cross.v", d_t, d_q, rng)
            nn.add_linear(p, f"{blk}.cross.o", d_q, d_q, rng)
            nn.add_norm(p, f"{blk}.norm3", d_q)
            nn.add_linear(p, f"{blk}.ff1", d_q, 2 * d_q, rng)
            nn.add_linear(p, f"{blk}.ff2", 2 * d_q, d_q, rng)
        for l in range(self.n_layers):
            # identity-initialized per-layer response maps
            nn.add_param(p, f"{name}.layer{l}.w", np.eye(d_q))
            nn.add_param(p, f"{name}.layer{l}.b", np.zeros(d_q))

    # --- pipeline pieces ---------------------------------------------------

    def tokenize(self, record: PromptRecord) -> np.ndarray:
        return render_and_tokenize(record, self.vocab)

    def encode_prompt(self, tokens: np.ndarray) -> ad.Tensor:
        """Token ids -> [max_tokens, text_dim] latent on the tape."""
        p, name = self.params, self.name
        h = ad.embed(p[f"{name}.embed.table"].value, tokens)
        h = ad.add(h, p[f"{name}.embed.pos"].value)
        normed = nn.layer_norm(p, f"{name}.enc.norm1", h)
        a, _ = nn.attention(p, f"{name}.enc.attn", normed, normed, self.text_dim)
        h = ad.add(h, nn.linear(p, f"{name}.enc.attn.o", a))
        f = nn.linear(p, f"{name}.enc.ff1", nn.layer_norm(p, f"{name}.enc.norm2", h))
        h = ad.add(h, nn.linear(p, f"{name}.enc.ff2", ad.silu(f)))
        return h

    def knowledge_injection(self, prompt_latent: ad.Tensor) -> ad.Tensor:
        """Run the generation queries through the decoder blocks -> R_task."""
        p, name = self.params, self.name
        x = p[f"{name}.queries"].value
        for i in range(self.n_blocks):
            blk = f"{name}.block{i}"
            q_in = nn.layer_norm(p, f"{blk}.norm1", x)
            a, _ = nn.attention(p, f"{blk}.self", q_in, q_in, self.query_dim)
            x = ad.add(x, nn.linear(p, f"{blk}.self.o", a))
            a, _ = nn.attention(p, f"{blk}.cross",
                                nn.layer_norm(p, f"{blk}.norm2", x),
                                prompt_latent, self.query_dim)
            x = ad.add(x, nn.linear(p, f"{blk}.cross.o", a))
            f = nn.linear(p, f"{blk}.ff1", nn.layer_norm(p, f"{blk}.norm3", x))
            x = ad.add(x, nn.linear(p, f"{blk}.ff2", ad.silu(f)))
        return x

    def layer_responses(self, r_task: ad.Tensor) -> list[ad.Tensor]:
        """Expand R_task into one response matrix per backbone level."""
        p, name = self.params, self.name
        out = []
        for l in range(self.n_layers):
            y = ad.matmul(r_task, p[f"{name}.layer{l}.w"].value)
            out.append(ad.add_bias(y, p[f"{name}.layer{l}.b"].value, axis=1))
        return out

    def responses_for(self, record: PromptRecord) -> list[ad.Tensor]:
        tokens = self.tokenize(record)
        return self.layer_responses(self.knowledge_injection(self.encode_prompt(tokens)))
