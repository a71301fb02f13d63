"""Model hyperparameters.

reference() carries the full-size profile; desk() shrinks every width
(and the block/layer counts) so the whole system trains on a laptop CPU
in minutes while keeping the same architecture.
"""

from dataclasses import dataclass, replace


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 768        # SSL feature width consumed from files
    speech_hidden: int = 256      # per direction
    speech_layers: int = 3
    text_embed_dim: int = 512
    text_hidden: int = 256
    rat_blocks: int = 8
    hidden: int = 256
    heads: int = 8
    ffn: int = 1024
    rat_dropout: float = 0.1
    classifier_hidden: int = 256
    classifier_layers: int = 2
    classifier_dropout: float = 0.2
    n_speakers: int = 11
    rule_embed: int = 128
    node_embed: int = 64
    decoder_hidden: int = 512
    decoder_dropout: float = 0.21
    adv_weight: float = 0.01
    pool_frames: int = 4          # speech frames pooled per question position
    hash_buckets: int = 20000
    max_decode_steps: int = 200
    max_joint_len: int = 512

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")
        for name in ("feature_dim", "speech_hidden", "hidden", "decoder_hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def head_dim(self):
        return self.hidden // self.heads

    @classmethod
    def reference(cls, **overrides):
        return replace(cls(), **overrides)

    @classmethod
    def desk(cls, **overrides):
        base = cls(
            feature_dim=48,
            speech_hidden=64,
            speech_layers=2,
            text_embed_dim=48,
            text_hidden=48,
            rat_blocks=2,
            hidden=96,
            heads=4,
            ffn=192,
            classifier_hidden=48,
            n_speakers=6,
            rule_embed=48,
            node_embed=24,
            decoder_hidden=160,
            hash_buckets=4096,
            pool_frames=2,
        )
        return replace(base, **overrides)

    @classmethod
    def tiny(cls, **overrides):
        """For gradient checks: every width minimal, one block each."""
        base = cls(
            feature_dim=4,
            speech_hidden=8,
            speech_layers=1,
            text_embed_dim=8,
            text_hidden=8,
            rat_blocks=1,
            hidden=8,
            heads=2,
            ffn=16,
            classifier_hidden=8,
            classifier_layers=1,
            n_speakers=2,
            rule_embed=8,
            node_embed=4,
            decoder_hidden=16,
            hash_buckets=64,
            rat_dropout=0.0,
            classifier_dropout=0.0,
            decoder_dropout=0.0,
        )
        return replace(base, **overrides)
