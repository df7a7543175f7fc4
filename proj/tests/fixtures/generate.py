#!/usr/bin/env python3
"""Regenerates the synthetic fixtures in this directory.

Everything is derived from a fixed seed, so rerunning reproduces the
checked-in files byte for byte. Standard library only.
"""

import base64
import json
import math
import random
import struct
from pathlib import Path

HERE = Path(__file__).resolve().parent
DIM = 16
MODEL = "fixture-lm"


def words(prefix, n, rng):
    consonants = "bcdfghjklmnprstvz"
    vowels = "aeiou"
    out = set()
    while len(out) < n:
        syllables = rng.randint(1, 3)
        w = "".join(rng.choice(consonants) + rng.choice(vowels) for _ in range(syllables))
        out.add(prefix + w)
    return sorted(out)


def write_lines(name, rows):
    with open(HERE / name, "w", encoding="utf-8", newline="\n") as f:
        for r in rows:
            f.write(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n")


def unit(v):
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v]


def encode(v):
    return base64.b64encode(struct.pack("<%df" % len(v), *v)).decode("ascii")


def sentence(rng, vocab, lo, hi, weights=None):
    n = rng.randint(lo, hi)
    return " ".join(rng.choices(vocab, weights=weights, k=n))


def zipf(n):
    return [1.0 / (i + 1) for i in range(n)]


def main():
    rng = random.Random(20240917)
    english = words("", 240, rng)
    other = words("zq", 240, rng)  # the second "language" shares no tokens with English
    en_weights = zipf(len(english))

    # Reference corpus: English documents whose embeddings sit around a few topic centers.
    centers = [unit([rng.gauss(0, 1) for _ in range(DIM)]) for _ in range(6)]
    refs, ref_vecs = [], []
    for i in range(400):
        doc_id = "ref-%04d" % i
        refs.append({"id": doc_id, "text": sentence(rng, english, 12, 40, en_weights)})
        c = centers[i % len(centers)]
        ref_vecs.append((doc_id, unit([x + rng.gauss(0, 0.35) for x in c])))
    write_lines("reference.jsonl", refs)
    write_lines("reference_embeddings.jsonl",
                [{"schema_version": 1, "model_id": "fixture-encoder", "dim": DIM}] +
                [{"doc_id": d, "vector": encode(v)} for d, v in ref_vecs])

    # Tasks drift away from the reference by degrees: a growing share of rare
    # tokens and embeddings further from the topic centers. Accuracy falls with drift.
    tasks = [("arith", 0.0, 0.85), ("lexicon", 0.2, 0.70), ("riddles", 0.4, 0.60),
             ("proverbs", 0.6, 0.45), ("idioms", 0.8, 0.35)]
    rare = words("x", 80, rng)
    config_scores = []
    for t, (name, drift, p_correct) in enumerate(tasks):
        examples, vecs, scores = [], [], []
        for i in range(40):
            ex_id = "%s-%03d" % (name, i)
            mix = [w if rng.random() > drift else rng.choice(rare)
                   for w in sentence(rng, english, 6, 20, en_weights).split()]
            targets = rng.sample(english, 4)
            correct = rng.randrange(4)
            examples.append({"id": ex_id, "input": " ".join(mix), "instruction": None,
                             "targets": targets, "correct_index": correct})
            if name == "arith" and i == 0:
                # Verbatim leak: this example's embedding is a reference document's.
                vec = ref_vecs[7][1]
            else:
                c = centers[rng.randrange(len(centers))]
                vec = unit([x + rng.gauss(0, 0.35 + 1.5 * drift) for x in c])
            vecs.append({"doc_id": ex_id, "vector": encode(vec)})
            scores.append(score_record(rng, ex_id, correct, p_correct, 1.5 + 2.0 * drift))
        write_lines("task_%s.jsonl" % name, examples)
        write_lines("task_%s_embeddings.jsonl" % name,
                    [{"schema_version": 1, "model_id": "fixture-encoder", "dim": DIM}] + vecs)
        write_scores("scores_%s.jsonl" % name, scores, shots=0)
        config_scores.append({"task": name, "file": "scores_%s.jsonl" % name})

    # Parallel corpus for titration: 200 aligned pairs, source in English,
    # translation in the disjoint token inventory.
    src, tgt = [], []
    for i in range(200):
        ex_id = "xnli-%03d" % i
        n = rng.randint(8, 24)
        s = " ".join(rng.choices(english, weights=en_weights, k=n))
        z = " ".join(rng.choice(other) for _ in range(n))
        targets = ["entailment", "neutral", "contradiction"]
        correct = rng.randrange(3)
        src.append({"id": ex_id, "input": s, "instruction": None, "targets": targets, "correct_index": correct})
        tgt.append({"id": ex_id, "input": z, "instruction": None, "targets": targets, "correct_index": correct})
    write_lines("parallel_en.jsonl", src)
    write_lines("parallel_zq.jsonl", tgt)

    titration_scores = []
    for f in (0.0, 0.25, 0.5, 0.75, 1.0):
        tag = "zq_f%.2f" % f
        recs = [score_record(rng, ex["id"], ex["correct_index"], 0.8 - 0.4 * f, 1.5 + 2.5 * f, choices=3)
                for ex in src]
        write_scores("scores_%s.jsonl" % tag, recs, shots=0)
        titration_scores.append({"task": tag, "file": "scores_%s.jsonl" % tag})

    write_config("fixture_config.json", {
        "name": "fixture",
        "seed": 7,
        "alpha": 0.05,
        "metrics": ["unigram_kl", "bigram_kl", "max_cosine", "mean_top1000_cosine", "mauve",
                    "input_ppl", "target_ppl"],
        "references": [{"name": "refcorpus", "documents": "reference.jsonl",
                        "embeddings": "reference_embeddings.jsonl"}],
        "tasks": [{"name": n, "file": "task_%s.jsonl" % n, "embeddings": "task_%s_embeddings.jsonl" % n}
                  for n, _, _ in tasks],
        "scores": config_scores,
        "tokenizer": {"kind": "vocab"},
        "ngram": {"sample_size": 150, "repeats": 3},
        "embedding": {"k": 50, "shard_size": 128},
        "mauve": {"sample_size": 200, "repeats": 2, "clusters": 8},
        "correlation": {"method": "spearman", "permutation": True, "iterations": 1000},
    })
    write_config("titration_config.json", {
        "name": "titration",
        "seed": 11,
        "metrics": ["unigram_kl", "bigram_kl", "input_ppl", "target_ppl"],
        "references": [{"name": "english", "documents": "reference.jsonl"}],
        "titration": [{"language": "zq", "source": "parallel_en.jsonl", "translated": "parallel_zq.jsonl"}],
        "scores": titration_scores,
        "ngram": {"sample_size": 200, "repeats": 5},
    })


def score_record(rng, ex_id, correct, p_correct, loss, choices=4):
    hit = rng.random() < p_correct
    logprobs = [round(-rng.uniform(4.0, 9.0), 6) for _ in range(choices)]
    best = max(range(choices), key=lambda i: logprobs[i])
    if hit:
        logprobs[correct] = round(max(logprobs) + rng.uniform(0.1, 1.0), 6)
    elif best == correct:
        wrong = (correct + 1) % choices
        logprobs[wrong] = round(logprobs[correct] + rng.uniform(0.1, 1.0), 6)
    return {"example_id": ex_id, "target_logprobs": logprobs,
            "input_logloss_per_token": round(loss + rng.gauss(0, 0.2), 6),
            "correct_target_logloss_per_token": round(loss + 0.5 + rng.gauss(0, 0.3), 6),
            "target_token_counts": [rng.randint(1, 4) for _ in range(choices)]}


def write_scores(name, records, shots):
    header = {"schema_version": 1, "kind": "scores", "model_id": MODEL, "tokenizer_id": "fixture-bpe",
              "shots": shots, "prompt_template": "{input} {target}"}
    write_lines(name, [header] + records)


def write_config(name, cfg):
    with open(HERE / name, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(cfg, indent=2) + "\n")


if __name__ == "__main__":
    main()
