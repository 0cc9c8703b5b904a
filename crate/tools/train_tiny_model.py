"""Train the bundled tiny GPT-2 so that it memorizes the fixture facts.

The model uses the real GPT-2 vocabulary and architecture at toy width. It is
stored in F16 with published GPT-2 tensor names (no "transformer." prefix),
then reference logits are computed from the stored (rounded) weights.

Usage: python3 tools/train_tiny_model.py
"""

import json
import pathlib
import shutil

import torch
from safetensors.torch import save_file
from transformers import GPT2Config, GPT2LMHeadModel

import reference_logits

ROOT = pathlib.Path(__file__).resolve().parent.parent
OUT = ROOT / "assets" / "tiny-gpt2"
TOK = ROOT / "assets" / "gpt2-tokenizer"
FACTS = ROOT / "assets" / "fixtures" / "facts"

CONFIG = dict(n_layer=4, n_head=4, d_model=48, n_ctx=64, vocab_size=50257, layernorm_epsilon=1e-5)


def main():
    torch.manual_seed(7)
    tok = reference_logits.load_tokenizer(TOK)
    facts = []
    for name in ["organ_systems.jsonl", "auto_systems.jsonl", "baseline.jsonl"]:
        for line in (FACTS / name).read_text().splitlines():
            facts.append(json.loads(line))
    seqs = [tok.encode(f["full_fact"]).ids for f in facts]
    width = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), width), 50256, dtype=torch.long)
    mask = torch.zeros((len(seqs), width), dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(s)
        mask[i, : len(s)] = True

    config = GPT2Config(
        vocab_size=CONFIG["vocab_size"],
        n_positions=CONFIG["n_ctx"],
        n_embd=CONFIG["d_model"],
        n_layer=CONFIG["n_layer"],
        n_head=CONFIG["n_head"],
        activation_function="gelu_new",
        resid_pdrop=0.0,
        embd_pdrop=0.0,
        attn_pdrop=0.0,
    )
    model = GPT2LMHeadModel(config)
    opt = torch.optim.AdamW(model.parameters(), lr=3e-3, weight_decay=0.0)
    model.train()
    for step in range(1500):
        logits = model(ids).logits[:, :-1]
        target = ids[:, 1:]
        keep = mask[:, 1:]
        loss = torch.nn.functional.cross_entropy(logits[keep], target[keep])
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 250 == 0:
            print(step, float(loss))
    model.eval()

    OUT.mkdir(parents=True, exist_ok=True)
    state = {}
    for k, v in model.state_dict().items():
        if k.startswith("lm_head") or k.endswith((".attn.bias", ".attn.masked_bias")):
            continue
        state[k.removeprefix("transformer.")] = v.detach().to(torch.float16).contiguous()
    save_file(state, str(OUT / "model.safetensors"))
    (OUT / "config.json").write_text(json.dumps(CONFIG, indent=2) + "\n")
    for f in ["vocab.json", "merges.txt"]:
        shutil.copy(TOK / f, OUT / f)

    rows = reference_logits.compute(OUT, reference_logits.DEFAULT_PROMPTS)
    for r in rows:
        print(r["argmax"], repr(tok.decode([r["argmax"]])), repr(r["text"]))

    # accuracy of the stored (F16) model on the fact prompts
    model = reference_logits.load_model(OUT)
    correct = 0
    with torch.no_grad():
        for f in facts:
            p = tok.encode(f["prompt"]).ids
            target = tok.encode(" " + f["prediction"]).ids[0]
            if int(torch.argmax(model(torch.tensor([p])).logits[0, -1])) == target:
                correct += 1
    print(f"correct {correct}/{len(facts)}")
    for f in ["vocab.json", "merges.txt"]:
        (OUT / f).unlink()


if __name__ == "__main__":
    main()
