"""Model assembly: encoder + decoder parameters behind one handle."""

from __future__ import annotations

from dataclasses import dataclass

from . import checkpoint as ckpt
from .autodiff import DEFAULT_DTYPE, ParamStore
from .config import TrainConfig
from .decoder import (
    ARDecoderParams,
    DecoderParams,
    PositionDistributions,
    TriggerLayout,
    decode_ar_baseline,
    decode_nar,
    generate,
    init_ar_decoder_params,
    init_decoder_params,
)
from .encoder import EncoderOutput, EncoderParams, encode, encode_batch, init_encoder_params
from .types import BundleCreative, CandidateContext


@dataclass
class Model:
    cfg: TrainConfig
    store: ParamStore
    encoder: EncoderParams
    layout: TriggerLayout
    decoder: DecoderParams | None = None
    ar_decoder: ARDecoderParams | None = None

    @property
    def mode(self) -> str:
        return "nar" if self.decoder is not None else "ar"

    def encode(self, ctx: CandidateContext) -> EncoderOutput:
        return encode(ctx, self.encoder)

    def encode_batch(self, ctxs: list[CandidateContext]) -> EncoderOutput:
        return encode_batch(ctxs, self.encoder)

    def decode(self, enc: EncoderOutput) -> PositionDistributions:
        if self.decoder is None:
            raise ValueError("model was built in autoregressive mode")
        return decode_nar(enc, self.decoder, self.layout, self.encoder.type_emb)

    def generate_for(self, ctx: CandidateContext) -> BundleCreative:
        if self.decoder is not None:
            return generate(self.decode(self.encode(ctx)))
        creative, _ = decode_ar_baseline(
            self.encode(ctx), self.ar_decoder, self.layout, self.cfg.ar_order
        )
        return creative

    def save(self, path) -> None:
        ckpt.save_checkpoint(
            path,
            self.store,
            seed=self.store.seed,
            config_hash=self.cfg.config_hash(),
            config=self.cfg.to_dict(),
        )


def build_model(cfg: TrainConfig, seed: int | None = None, dtype=DEFAULT_DTYPE) -> Model:
    """Initialize a fresh model; ``cfg.decoder_mode`` picks the decoder kind."""
    store = ParamStore(cfg.seed if seed is None else seed, dtype=dtype)
    enc = init_encoder_params(store, cfg)
    layout = TriggerLayout.for_creative(cfg.I, cfg.S)
    if cfg.decoder_mode == "nar":
        return Model(cfg=cfg, store=store, encoder=enc, layout=layout,
                     decoder=init_decoder_params(store, cfg, enc))
    return Model(cfg=cfg, store=store, encoder=enc, layout=layout,
                 ar_decoder=init_ar_decoder_params(store, cfg, enc))


def load_model(path, cfg: TrainConfig | None = None) -> Model:
    """Rebuild a model from a checkpoint; the stored config is used if none given."""
    meta, arrays = ckpt.load_checkpoint(path)
    if cfg is None:
        cfg = TrainConfig.from_dict(meta["config"])
    elif cfg.config_hash() != meta["config_hash"]:
        raise ValueError(
            f"checkpoint config hash {meta['config_hash']} does not match supplied config"
        )
    model = build_model(cfg, seed=meta["seed"])
    model.store.load_state_arrays(arrays)
    return model
