"""Optional diffusers plugin: shared attention on the Stable Cascade prior.

Only the text-conditioned prior (stage C) is hooked; the decoder stage runs
unmodified. In the prior's attention blocks the key/value input is the
block's image tokens followed by the step's own text tokens; image tokens
are shared across the sequence and text tokens stay private to each image.
"""
import logging
from functools import partial

import numpy as np
import torch

import config
from src.models.generation import BackendConfig, FeatureBlock, GenerationResult
from src.services.attention_hooks import (
    PromptTooLong,
    SharingController,
    SimilarityBias,
    UnsupportedBackend,
)
from src.services.shared_attention import attention_router, biased_attention, concat_kv

logger = logging.getLogger(__name__)

PRIOR_MODEL_ID = "stabilityai/stable-cascade-prior"
DECODER_MODEL_ID = "stabilityai/stable-cascade"
DECODER_STEPS = 10


class CascadeSharedAttnProcessor:
    """diffusers attention processor sharing image-token K/V within each image group."""

    def __init__(self, controller: SharingController, layer_id: str):
        self.controller = controller
        self.layer_id = layer_id

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, **kwargs):
        residual = hidden_states
        input_ndim = hidden_states.ndim
        if input_ndim == 4:
            batch_size, channel, height, width = hidden_states.shape
            hidden_states = hidden_states.view(batch_size, channel, height * width).transpose(1, 2)

        context = hidden_states if encoder_hidden_states is None else encoder_hidden_states
        query = attn.to_q(hidden_states)
        key = attn.to_k(context)
        value = attn.to_v(context)

        batch, positions, _ = query.shape
        head_dim = key.shape[-1] // attn.heads
        q = query.view(batch, -1, attn.heads, head_dim).transpose(1, 2)
        k = key.view(batch, -1, attn.heads, head_dim).transpose(1, 2)
        v = value.view(batch, -1, attn.heads, head_dim).transpose(1, 2)

        if self.controller.should_share(self.layer_id):
            out = self._shared(q, k, v, positions)
        else:
            bias = None
            if attention_mask is not None:
                bias = attn.prepare_attention_mask(attention_mask, k.shape[-2], batch)
                bias = bias.view(batch, attn.heads, -1, bias.shape[-1])
            out = biased_attention(q, k, v, bias)

        out = out.transpose(1, 2).reshape(batch, -1, attn.heads * head_dim).to(query.dtype)
        out = attn.to_out[0](out)
        out = attn.to_out[1](out)
        if input_ndim == 4:
            out = out.transpose(-1, -2).reshape(batch_size, channel, height, width)
        if attn.residual_connection:
            out = out + residual
        return out / attn.rescale_output_factor

    def _shared(self, q, k, v, positions: int) -> torch.Tensor:
        batch = q.shape[0]
        group = self.controller.group_size or batch
        outputs = []
        for start in range(0, batch, group):
            stop = start + group
            blocks = FeatureBlock(
                queries=q[start:stop],
                keys=k[start:stop, :, :positions],
                values=v[start:stop, :, :positions],
            )
            k_plus, v_plus = concat_kv(blocks)
            for i in range(group):
                s_plus, m_plus = self.controller.bias_provider(i, group, positions)
                image_bias = torch.log(s_plus.to(torch.float64)) + torch.log(m_plus.to(torch.float64))
                text_keys = k[start + i, :, positions:]
                text_values = v[start + i, :, positions:]
                bias = torch.cat([image_bias, image_bias.new_zeros(text_keys.shape[-2])])
                outputs.append(biased_attention(
                    q[start + i],
                    torch.cat([k_plus, text_keys], dim=-2),
                    torch.cat([v_plus, text_values], dim=-2),
                    bias,
                ))
        return torch.stack(outputs)


def install_on_prior(prior, controller: SharingController) -> int:
    """Install the shared processor on every attention layer of a diffusers denoiser."""
    processors = getattr(prior, "attn_processors", None)
    if not processors:
        raise UnsupportedBackend(f"{type(prior).__name__} exposes no attention processors")
    prior.set_attn_processor({
        name: CascadeSharedAttnProcessor(controller, name.removesuffix(".processor"))
        for name in processors
    })
    return len(processors)


def load_pipelines(device: str | None = None):
    """Load the Stable Cascade prior and decoder pipelines."""
    try:
        from diffusers import StableCascadeDecoderPipeline, StableCascadePriorPipeline
    except ImportError as exc:
        raise UnsupportedBackend("diffusers is not installed. Run: pip install diffusers") from exc
    device = device or ("cuda" if torch.cuda.is_available() else "cpu")
    dtype = torch.bfloat16 if device == "cuda" else torch.float32
    prior = StableCascadePriorPipeline.from_pretrained(PRIOR_MODEL_ID, torch_dtype=dtype).to(device)
    decoder = StableCascadeDecoderPipeline.from_pretrained(DECODER_MODEL_ID, torch_dtype=dtype).to(device)
    return prior, decoder


def generate_sequence_diffusers(
    prompts: list[str],
    seeds: list[int],
    masks,
    similarity,
    backend_config: BackendConfig,
    *,
    pipelines=None,
) -> GenerationResult:
    n = len(prompts)
    if len(seeds) != n:
        raise ValueError(f"{len(seeds)} seeds for {n} prompts")
    prior, decoder = pipelines or load_pipelines()
    tokenizer_limit = getattr(prior.tokenizer, "model_max_length", config.MAX_PROMPT_TOKENS)
    for index, prompt in enumerate(prompts):
        tokens = len(prior.tokenizer(prompt).input_ids)
        if tokens > tokenizer_limit:
            raise PromptTooLong(f"prompt {index} has {tokens} tokens, limit is {tokenizer_limit}")

    controller = SharingController(
        partial(attention_router, backend_config.schedule), SimilarityBias(similarity, masks), group_size=n,
    )
    original = dict(prior.prior.attn_processors)
    install_on_prior(prior.prior, controller)
    last_step = backend_config.total_steps - 1

    def _advance(pipe, step, timestep, callback_kwargs):
        controller.set_step(min(step + 1, last_step))
        return callback_kwargs

    device = prior.device
    generators = [torch.Generator(device).manual_seed(int(s)) for s in seeds]
    height, width = backend_config.image_size
    try:
        controller.set_step(0)
        prior_out = prior(
            prompt=prompts,
            height=height,
            width=width,
            num_inference_steps=backend_config.total_steps,
            guidance_scale=backend_config.guidance_scale,
            generator=generators,
            callback_on_step_end=_advance,
        )
    finally:
        prior.prior.set_attn_processor(original)

    embeddings = prior_out.image_embeddings
    images = decoder(
        image_embeddings=embeddings.to(decoder.dtype),
        prompt=prompts,
        num_inference_steps=DECODER_STEPS,
        guidance_scale=0.0,
        generator=generators,
        output_type="pil",
    ).images
    logger.info("Stable Cascade generated %d images", len(images))
    return GenerationResult(
        images=list(images),
        latents=[embeddings[b].float().cpu().numpy().astype(np.float32) for b in range(n)],
        prompts=list(prompts),
        seeds=[int(s) for s in seeds],
        trace=controller.trace,
    )
