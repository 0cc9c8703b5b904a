"""Compute reference final-position logits with the Hugging Face GPT-2 model.

The checkpoint directory must hold model.safetensors (published GPT-2 naming,
with or without the "transformer." prefix), config.json and the GPT-2
tokenizer files vocab.json / merges.txt. The output is written next to the
checkpoint:

  reference_logits.safetensors   tensor "logits" [n_prompts, vocab] F32
  reference_prompts.json         [{"text", "ids", "argmax"}]

Usage: python3 tools/reference_logits.py DIR [--prompts prompts.txt]
"""

import argparse
import json
import pathlib

import torch
from safetensors.torch import load_file, save_file
from tokenizers import Tokenizer, decoders, models, pre_tokenizers
from transformers import GPT2Config, GPT2LMHeadModel

DEFAULT_PROMPTS = [
    "The Eiffel Tower is located in the city of",
    "The capital of Norway is",
    "Toyota was founded in the country of",
    "The mother tongue of Victor Hugo is",
    "Lionel Messi plays the sport of",
    "The first bronchi to branch from the trachea are the right and left main",
    "Bile is produced by the liver and stored in the",
    "Spark plugs ignite the air and fuel mixture inside the",
    "The master cylinder converts pedal pressure into hydraulic",
    "Hello world, this is a parity check with unrelated text and digits 12345",
]


def load_tokenizer(directory):
    tok = Tokenizer(
        models.BPE.from_file(str(directory / "vocab.json"), str(directory / "merges.txt"))
    )
    tok.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False)
    tok.decoder = decoders.ByteLevel()
    return tok


def load_model(directory):
    cfg = json.loads((directory / "config.json").read_text())
    config = GPT2Config(
        vocab_size=cfg["vocab_size"],
        n_positions=cfg.get("n_ctx", cfg.get("n_positions")),
        n_embd=cfg.get("d_model", cfg.get("n_embd")),
        n_layer=cfg["n_layer"],
        n_head=cfg["n_head"],
        layer_norm_epsilon=cfg.get("layernorm_epsilon", cfg.get("layer_norm_epsilon", 1e-5)),
        activation_function="gelu_new",
        resid_pdrop=0.0,
        embd_pdrop=0.0,
        attn_pdrop=0.0,
    )
    model = GPT2LMHeadModel(config)
    state = load_file(str(directory / "model.safetensors"))
    state = {
        (k if k.startswith("transformer.") else "transformer." + k): v.float()
        for k, v in state.items()
        if not k.startswith("lm_head")
    }
    missing, unexpected = model.load_state_dict(state, strict=False)
    missing = [m for m in missing if m != "lm_head.weight" and not m.endswith(".attn.bias")]
    unexpected = [u for u in unexpected if not u.endswith((".attn.bias", ".attn.masked_bias"))]
    assert not missing and not unexpected, (missing, unexpected)
    model.tie_weights()
    model.eval()
    return model


def compute(directory, prompts):
    tok = load_tokenizer(directory)
    model = load_model(directory)
    rows = []
    out = []
    with torch.no_grad():
        for text in prompts:
            ids = tok.encode(text).ids
            logits = model(torch.tensor([ids])).logits[0, -1].float()
            rows.append(logits)
            out.append({"text": text, "ids": ids, "argmax": int(torch.argmax(logits))})
    save_file(
        {"logits": torch.stack(rows).contiguous()},
        str(directory / "reference_logits.safetensors"),
    )
    (directory / "reference_prompts.json").write_text(json.dumps(out, indent=1) + "\n")
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("directory", type=pathlib.Path)
    ap.add_argument("--prompts", type=pathlib.Path)
    args = ap.parse_args()
    prompts = DEFAULT_PROMPTS
    if args.prompts:
        prompts = [p for p in args.prompts.read_text().splitlines() if p.strip()]
    for row in compute(args.directory, prompts):
        print(row["argmax"], repr(row["text"]))


if __name__ == "__main__":
    main()
