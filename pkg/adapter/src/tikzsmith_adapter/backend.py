"""Model backend: a causal LM conditioned on vision features for rollouts,
and the vision encoder itself for pooled/patch embeddings.

The image enters the LM as a prefix of projected patch embeddings (a linear
connector maps the vision width onto the LM embedding width). Sampling runs a
manual loop with an explicitly seeded generator, so identical requests with
the same seed reproduce identical tokens. Requests are serialized per
instance; the caller holds the lock.
"""

from __future__ import annotations

import io
import threading
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from PIL import Image

from .config import TINY_RANDOM, AdapterConfig
from .lines import LineBatch, split_generated_text


class ByteTokenizer:
    """Byte-level tokenizer: ids 0..255 are raw bytes, 256 bos, 257 eos."""

    vocab_size = 258
    bos_token_id = 256
    eos_token_id = 257

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids: list[int]) -> str:
        data = bytes(i for i in ids if 0 <= i < 256)
        return data.decode("utf-8", errors="replace")


@dataclass
class RolloutResult:
    batch: LineBatch
    tokens_used: int


def _tiny_language_model():
    from transformers import GPT2Config, GPT2LMHeadModel

    config = GPT2Config(
        vocab_size=ByteTokenizer.vocab_size,
        n_embd=32,
        n_layer=2,
        n_head=2,
        n_positions=512,
        bos_token_id=ByteTokenizer.bos_token_id,
        eos_token_id=ByteTokenizer.eos_token_id,
    )
    torch.manual_seed(0)
    return GPT2LMHeadModel(config).eval(), ByteTokenizer()


def _tiny_vision_model():
    from transformers import ViTConfig, ViTModel

    config = ViTConfig(
        hidden_size=32,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=64,
        image_size=32,
        patch_size=16,
        num_channels=3,
    )
    torch.manual_seed(1)
    return ViTModel(config).eval(), 32


def _load_language_model(identifier: str, device: str):
    if identifier == TINY_RANDOM:
        model, tokenizer = _tiny_language_model()
        return model.to(device), tokenizer
    from transformers import AutoModelForCausalLM, AutoTokenizer

    tokenizer = AutoTokenizer.from_pretrained(identifier)
    model = AutoModelForCausalLM.from_pretrained(identifier).eval().to(device)
    return model, tokenizer


def _load_vision_model(identifier: str, device: str):
    if identifier == TINY_RANDOM:
        model, image_size = _tiny_vision_model()
        return model.to(device), image_size
    from transformers import AutoModel

    model = AutoModel.from_pretrained(identifier).eval().to(device)
    image_size = getattr(model.config, "image_size", 224)
    return model, image_size


class ModelBackend:
    def __init__(self, config: AdapterConfig):
        self.config = config
        self.device = torch.device(config.device)
        self.lm, self.tokenizer = _load_language_model(config.model, config.device)
        self.vision, self.image_size = _load_vision_model(config.vision_encoder, config.device)
        self.lock = threading.Lock()

        vision_width = int(self.vision.config.hidden_size)
        lm_width = int(self.lm.get_input_embeddings().weight.shape[1])
        self.connector = torch.nn.Linear(vision_width, lm_width, bias=False).to(self.device)
        gen = torch.Generator().manual_seed(config.connector_seed)
        with torch.no_grad():
            self.connector.weight.normal_(0.0, 0.02, generator=gen)
        self.connector.eval()

        self.num_vision_layers = int(self.vision.config.num_hidden_layers)
        model_positions = getattr(self.lm.config, "max_position_embeddings", None)
        self.context_limit = min(
            config.max_context_tokens,
            model_positions if model_positions else config.max_context_tokens,
        )

    # ---------------------------------------------------------------- vision

    def _pixel_values(self, png_bytes: bytes) -> torch.Tensor:
        image = Image.open(io.BytesIO(png_bytes)).convert("RGB")
        image = image.resize((self.image_size, self.image_size), Image.BILINEAR)
        arr = np.asarray(image, dtype=np.float32) / 255.0
        arr = (arr - 0.5) / 0.5
        tensor = torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)
        return tensor.to(self.device)

    def _patch_states(self, png_bytes: bytes, layer_index: Optional[int]) -> torch.Tensor:
        if layer_index is None:
            layer_index = self.config.patch_layer_default
        with torch.no_grad():
            out = self.vision(
                pixel_values=self._pixel_values(png_bytes), output_hidden_states=True
            )
        states = out.hidden_states  # embeddings + one entry per layer
        if layer_index is None:
            chosen = states[-1]
        else:
            if not 0 <= layer_index <= self.num_vision_layers:
                raise ValueError(
                    f"layer_index {layer_index} outside [0, {self.num_vision_layers}]"
                )
            chosen = states[layer_index]
        return chosen[0, 1:, :]  # drop the class token

    def embed_pooled(self, png_bytes: bytes) -> np.ndarray:
        patches = self._patch_states(png_bytes, None)
        return patches.mean(dim=0).cpu().numpy().astype(float)

    def embed_patches(self, png_bytes: bytes, layer_index: Optional[int]) -> np.ndarray:
        return self._patch_states(png_bytes, layer_index).cpu().numpy().astype(float)

    # --------------------------------------------------------------- rollout

    def _image_prefix_embeds(self, png_bytes: bytes) -> torch.Tensor:
        patches = self._patch_states(png_bytes, None)
        with torch.no_grad():
            return self.connector(patches).unsqueeze(0)

    def sample_rollout(
        self,
        png_bytes: bytes,
        prefix_lines: list[str],
        temperature: float,
        max_new_lines: int,
        seed: Optional[int],
    ) -> RolloutResult:
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        if max_new_lines < 1:
            raise ValueError("max_new_lines must be positive")

        prefix_text = "\n".join(prefix_lines) + ("\n" if prefix_lines else "")
        prefix_ids = self.tokenizer.encode(prefix_text)

        embed_layer = self.lm.get_input_embeddings()
        image_embeds = self._image_prefix_embeds(png_bytes)
        room = self.context_limit - len(prefix_ids) - int(image_embeds.shape[1]) - 1
        if room < 1:
            # context exhausted: close the sequence rather than overflow
            return RolloutResult(batch=LineBatch(lines=[], eos=True), tokens_used=0)
        max_new_tokens = min(self.config.max_new_tokens_per_request, room)
        pieces = [image_embeds]
        if prefix_ids:
            ids = torch.tensor([prefix_ids], device=self.device)
            pieces.append(embed_layer(ids))
        inputs = torch.cat(pieces, dim=1)

        generator = torch.Generator()
        generator.manual_seed(seed if seed is not None else torch.seed() % (2**62))

        eos_id = self.tokenizer.eos_token_id
        sampled: list[int] = []
        eos_reached = False
        with torch.no_grad():
            out = self.lm(inputs_embeds=inputs, use_cache=True)
            logits = out.logits[:, -1, :]
            past = out.past_key_values
            for _ in range(max_new_tokens):
                probs = torch.softmax(logits / temperature, dim=-1)
                next_id = int(torch.multinomial(probs.cpu(), 1, generator=generator))
                if next_id == eos_id:
                    eos_reached = True
                    break
                sampled.append(next_id)
                step = self.lm(
                    input_ids=torch.tensor([[next_id]], device=self.device),
                    past_key_values=past,
                    use_cache=True,
                )
                logits = step.logits[:, -1, :]
                past = step.past_key_values

        text = self.tokenizer.decode(sampled)
        batch = split_generated_text(text, eos_reached, max_new_lines)
        tokens_used = len(sampled) + (1 if eos_reached else 0)
        return RolloutResult(batch=batch, tokens_used=tokens_used)
