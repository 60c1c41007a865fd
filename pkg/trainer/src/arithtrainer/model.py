"""Spec-conditioned character-level transformer.

Each (x, y) spec pair is projected by a shared MLP into one memory
token; a causal transformer decoder attends over that memory while
generating program text one character at a time.  Compute is accounted
as 6 * parameters * tokens (the standard dense training estimate).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
from torch import nn

from .vocab import BOS, EOS, PAD, Vocab


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 3
    d_ff: int = 512
    n_pairs: int = 64
    max_len: int = 48
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(
                f"n_heads {self.n_heads} must divide d_model {self.d_model}"
            )
        if self.max_len < 2 or self.n_pairs < 1:
            raise ValueError("max_len >= 2 and n_pairs >= 1 required")


class SpecToProgramModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.pair_mlp = nn.Sequential(
            nn.Linear(2, cfg.d_model),
            nn.GELU(),
            nn.Linear(cfg.d_model, cfg.d_model),
        )
        self.char_embed = nn.Embedding(cfg.vocab_size, cfg.d_model, padding_idx=PAD)
        self.pos_embed = nn.Embedding(cfg.max_len, cfg.d_model)
        layer = nn.TransformerDecoderLayer(
            d_model=cfg.d_model,
            nhead=cfg.n_heads,
            dim_feedforward=cfg.d_ff,
            dropout=cfg.dropout,
            batch_first=True,
            norm_first=True,
        )
        self.decoder = nn.TransformerDecoder(layer, num_layers=cfg.n_layers)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size)

    def encode_spec(self, spec: torch.Tensor) -> torch.Tensor:
        """(B, P, 2) -> (B, P, d_model) memory tokens."""
        return self.pair_mlp(spec)

    def forward(self, spec: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        """Logits (B, T, V) for next-token prediction given (B, T) prefixes."""
        b, t = tokens.shape
        memory = self.encode_spec(spec)
        pos = torch.arange(t, device=tokens.device)
        h = self.char_embed(tokens) + self.pos_embed(pos)[None]
        causal = nn.Transformer.generate_square_subsequent_mask(t, device=tokens.device)
        h = self.decoder(
            h, memory, tgt_mask=causal, tgt_key_padding_mask=tokens == PAD
        )
        return self.head(h)

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    @torch.no_grad()
    def sample(
        self,
        spec: torch.Tensor,
        n: int = 10,
        temperature: float = 0.8,
        generator: torch.Generator | None = None,
    ) -> list[list[int]]:
        """n temperature-sampled completions per spec row.

        Returns token id lists without BOS; an emitted EOS ends a row.
        """
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.eval()
        b = spec.shape[0]
        memory = self.encode_spec(spec).repeat_interleave(n, dim=0)
        tokens = torch.full((b * n, 1), BOS, dtype=torch.int64, device=spec.device)
        finished = torch.zeros(b * n, dtype=torch.bool, device=spec.device)
        for step in range(self.cfg.max_len - 1):
            t = tokens.shape[1]
            pos = torch.arange(t, device=tokens.device)
            h = self.char_embed(tokens) + self.pos_embed(pos)[None]
            causal = nn.Transformer.generate_square_subsequent_mask(t, device=tokens.device)
            h = self.decoder(h, memory, tgt_mask=causal)
            logits = self.head(h[:, -1]) / temperature
            logits[:, PAD] = -math.inf
            logits[:, BOS] = -math.inf
            probs = torch.softmax(logits, dim=-1)
            nxt = torch.multinomial(probs, 1, generator=generator).squeeze(1)
            nxt[finished] = EOS
            tokens = torch.cat([tokens, nxt[:, None]], dim=1)
            finished |= nxt == EOS
            if finished.all():
                break
        return [row[1:].tolist() for row in tokens]

    def decode_candidates(
        self, spec, vocab: Vocab, n=10, temperature=0.8, generator=None
    ) -> list[list[str]]:
        """Per spec row, n decoded candidate program strings."""
        rows = self.sample(spec, n, temperature, generator)
        return [
            [vocab.decode(rows[b * n + j]) for j in range(n)]
            for b in range(spec.shape[0])
        ]


def estimate_flops(n_params: int, n_tokens: int) -> float:
    """Training compute: 6 FLOPs per parameter per processed token."""
    return 6.0 * float(n_params) * float(n_tokens)


def save_checkpoint(path, model: SpecToProgramModel, vocab: Vocab, extra=None) -> None:
    torch.save(
        {
            "config": asdict(model.cfg),
            "alphabet": vocab.alphabet,
            "state_dict": model.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path) -> tuple[SpecToProgramModel, Vocab, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    cfg = ModelConfig(**blob["config"])
    model = SpecToProgramModel(cfg)
    model.load_state_dict(blob["state_dict"])
    return model, Vocab(blob["alphabet"]), blob["extra"]
