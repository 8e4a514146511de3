"""Composition of encoder, allocator, quantizer and decoder.

A Model bundles all learnable parameters plus the quantization
hyperparameters, and forward_image runs the full
patchify -> encode -> allocate -> quantize -> decode pass for one image.
Training and evaluation both build on this module.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from dynavq.allocator import AllocatorCache, AllocatorParams, allocator_forward
from dynavq.autoencoder import (
    MlpCache,
    MlpParams,
    encode,
    mlp_forward,
    patchify,
    unpatchify,
)
from dynavq.codebook import Codebook
from dynavq.quantizer import QuantizeMode, QuantizeOutput, quantize


@dataclass
class Model:
    """All parameters of the tokenizer plus quantization settings."""

    codebook: Codebook
    allocator: AllocatorParams
    encoder: MlpParams
    decoder: MlpParams
    patch_size: int
    top_k: int
    pool: int
    temperature: float = 1.0
    beta: float = 0.25
    weighting: str = "softmax"

    def __post_init__(self):
        if self.encoder.out_dim != self.codebook.embed_dim:
            raise ValueError("encoder output dim must match the codebook embed dim")
        if self.decoder.in_dim != self.codebook.embed_dim:
            raise ValueError("decoder input dim must match the codebook embed dim")
        if self.allocator.in_channels != self.codebook.embed_dim:
            raise ValueError("allocator channels must match the codebook embed dim")
        if not 1 <= self.top_k <= self.codebook.primitives_per_sub:
            raise ValueError("top_k must lie in [1, primitives_per_sub]")
        if not self.top_k <= self.pool <= self.codebook.primitives_per_sub:
            raise ValueError("pool must lie in [top_k, primitives_per_sub]")

    def adaptive_mode(self) -> QuantizeMode:
        return QuantizeMode.adaptive(self.top_k)

    def copy(self) -> "Model":
        return Model(
            codebook=self.codebook.copy(),
            allocator=self.allocator.copy(),
            encoder=self.encoder.copy(),
            decoder=self.decoder.copy(),
            patch_size=self.patch_size,
            top_k=self.top_k,
            pool=self.pool,
            temperature=self.temperature,
            beta=self.beta,
            weighting=self.weighting,
        )


@dataclass
class ForwardResult:
    """One image's full forward pass with cached activations."""

    patches: np.ndarray
    embeddings: np.ndarray
    ratios: np.ndarray
    quant: QuantizeOutput
    recon_patches: np.ndarray
    encoder_cache: MlpCache
    allocator_cache: AllocatorCache
    decoder_cache: MlpCache

    def recon_image(self, height: int, width: int, patch: int) -> np.ndarray:
        return unpatchify(self.recon_patches, height, width, patch)


def forward_image(
    model: Model, image: np.ndarray, mode: Optional[QuantizeMode] = None
) -> ForwardResult:
    """Run the full pipeline on one grayscale image.

    ``mode`` defaults to the model's adaptive mode. The allocator runs in
    every mode (its ratios are logged and trained even when a forced mode
    ignores them).
    """
    if mode is None:
        mode = model.adaptive_mode()
    patches = patchify(image, model.patch_size)
    embeddings, encoder_cache = encode(patches, model.encoder)
    ratios, allocator_cache = allocator_forward(embeddings, model.allocator)
    quant = quantize(
        embeddings,
        model.codebook,
        ratios,
        mode,
        temperature=model.temperature,
        beta=model.beta,
        pool=model.pool if mode.kind == "adaptive" else None,
        weighting=model.weighting,
    )
    recon_patches, decoder_cache = mlp_forward(quant.quantized, model.decoder)
    return ForwardResult(
        patches=patches,
        embeddings=embeddings,
        ratios=ratios,
        quant=quant,
        recon_patches=recon_patches,
        encoder_cache=encoder_cache,
        allocator_cache=allocator_cache,
        decoder_cache=decoder_cache,
    )
