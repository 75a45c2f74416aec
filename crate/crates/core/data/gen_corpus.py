#!/usr/bin/env python3
"""Regenerates the bundled synthetic instruction corpus.

Records follow the Alpaca schema (instruction / input / output). The tasks are
small deterministic string and arithmetic transformations so that a byte-level
model of a few million parameters can learn them on a CPU. Every record fits a
256-token context after templating.

    python3 gen_corpus.py            # writes train.jsonl, val.jsonl, prompts.jsonl
"""
import json
import random
from pathlib import Path

SEED = 20231016
TRAIN_BYTES = 1_000_000

WORDS = """apple river stone garden window planet silver forest candle bridge
orange market winter summer rocket pencil guitar island mirror dragon cookie
engine lantern meadow puzzle rabbit saddle temple velvet wizard yellow zebra
anchor butter castle desert falcon harbor jungle kettle ladder marble needle
ocean pepper quiet ribbon shadow thunder umbrella violet walnut basket cotton
dinner feather glacier hammer insect jacket kitten lemon monkey napkin oyster
parrot quilt rainbow spider tomato valley wagon canyon blossom copper""".split()

ANTONYMS = [("hot", "cold"), ("big", "small"), ("fast", "slow"), ("happy", "sad"),
            ("light", "dark"), ("early", "late"), ("open", "closed"), ("full", "empty"),
            ("strong", "weak"), ("rich", "poor"), ("young", "old"), ("hard", "soft"),
            ("high", "low"), ("wet", "dry"), ("loud", "quiet"), ("clean", "dirty"),
            ("thick", "thin"), ("near", "far"), ("brave", "afraid"), ("first", "last")]

CAPITALS = [("France", "Paris"), ("Japan", "Tokyo"), ("Italy", "Rome"), ("Spain", "Madrid"),
            ("Egypt", "Cairo"), ("Canada", "Ottawa"), ("Kenya", "Nairobi"), ("Peru", "Lima"),
            ("Norway", "Oslo"), ("Greece", "Athens"), ("Chile", "Santiago"), ("Cuba", "Havana"),
            ("Poland", "Warsaw"), ("Austria", "Vienna"), ("Ireland", "Dublin"),
            ("Portugal", "Lisbon"), ("Sweden", "Stockholm"), ("India", "New Delhi"),
            ("Germany", "Berlin"), ("Mexico", "Mexico City")]

ANIMALS = [("eagle", "bird"), ("shark", "fish"), ("horse", "mammal"), ("lizard", "reptile"),
           ("sparrow", "bird"), ("salmon", "fish"), ("whale", "mammal"), ("turtle", "reptile"),
           ("owl", "bird"), ("trout", "fish"), ("tiger", "mammal"), ("snake", "reptile"),
           ("penguin", "bird"), ("tuna", "fish"), ("rabbit", "mammal"), ("crocodile", "reptile")]

ONES = "zero one two three four five six seven eight nine".split()
TEENS = "ten eleven twelve thirteen fourteen fifteen sixteen seventeen eighteen nineteen".split()
TENS = "_ _ twenty thirty forty fifty sixty seventy eighty ninety".split()


def number_words(n):
    if n < 10:
        return ONES[n]
    if n < 20:
        return TEENS[n - 10]
    t, o = divmod(n, 10)
    return TENS[t] if o == 0 else f"{TENS[t]}-{ONES[o]}"


def task_reverse(r):
    w = r.choice(WORDS)
    return "Reverse the word.", w, w[::-1]


def task_upper(r):
    ws = " ".join(r.sample(WORDS, 2))
    return "Uppercase this.", ws, ws.upper()


def task_sort(r):
    xs = [r.randint(0, 99) for _ in range(r.randint(3, 6))]
    return (f"Sort in ascending order: {', '.join(map(str, xs))}", "",
            ", ".join(map(str, sorted(xs))))


def task_sum(r):
    a, b = r.randint(0, 50), r.randint(0, 49)
    return f"What is the sum of {a} and {b}?", "", f"The sum of {a} and {b} is {a + b}."


def task_antonym(r):
    a, b = r.choice(ANTONYMS)
    if r.random() < 0.5:
        a, b = b, a
    return f"Give the opposite of the word {a}.", "", f"The opposite of {a} is {b}."


def task_capital(r):
    c, cap = r.choice(CAPITALS)
    return f"Name the capital city of {c}.", "", f"The capital of {c} is {cap}."


def task_animal(r):
    a, k = r.choice(ANIMALS)
    return (f"Is the {a} a mammal, bird, fish, or reptile?", "",
            f"The {a} is a {k}.")


def task_vowels(r):
    w = r.choice(WORDS)
    n = sum(c in "aeiou" for c in w)
    return "Count the vowels.", w, f"{w} has {n}."


def task_spell(r):
    w = r.choice(WORDS)
    return "Spell with dashes.", w, "-".join(w)


def task_words(r):
    n = r.randint(0, 99)
    return f"Write the number {n} in words.", "", number_words(n)


def task_largest(r):
    xs = [r.randint(0, 99) for _ in range(r.randint(3, 6))]
    return (f"Find the largest number in {', '.join(map(str, xs))}.", "",
            f"The largest number is {max(xs)}.")


def task_repeat(r):
    ws = " ".join(r.sample(WORDS, 2))
    return f"Repeat the phrase '{ws}' two times.", "", f"{ws} {ws}"


def task_first(r):
    ws = r.sample(WORDS, r.randint(3, 5))
    return (f"List the first letter of each word: {' '.join(ws)}", "",
            " ".join(w[0] for w in ws))


TASKS = [task_reverse, task_upper, task_sort, task_sum, task_antonym, task_capital,
         task_animal, task_vowels, task_spell, task_words, task_largest, task_repeat,
         task_first]


WITH_INPUT = ("Below is an instruction that describes a task, paired with an input that "
              "provides further context. Write a response that appropriately completes "
              "the request.\n\n### Instruction:\n{instruction}\n\n### Input:\n{input}"
              "\n\n### Response:\n")
NO_INPUT = ("Below is an instruction that describes a task. Write a response that "
            "appropriately completes the request.\n\n### Instruction:\n{instruction}"
            "\n\n### Response:\n")
MAX_TOKENS = 257  # BOS + rendered prompt + output + EOS must fit seq 256 plus the shift


def token_count(rec):
    template = WITH_INPUT if rec["input"] else NO_INPUT
    prompt = template.replace("{instruction}", rec["instruction"]).replace("{input}", rec["input"])
    return 1 + len(prompt.encode()) + len(rec["output"].encode()) + 1


def record(r):
    instruction, inp, output = r.choice(TASKS)(r)
    rec = {"instruction": instruction, "input": inp, "output": output}
    assert token_count(rec) <= MAX_TOKENS, rec
    return rec


def write(path, records):
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")


def main():
    here = Path(__file__).parent
    r = random.Random(SEED)
    train, size = [], 0
    while size < TRAIN_BYTES:
        rec = record(r)
        train.append(rec)
        size += len(json.dumps(rec)) + 1
    val = [record(r) for _ in range(400)]
    prompts = [record(r) for _ in range(64)]
    write(here / "train.jsonl", train)
    write(here / "val.jsonl", val)
    write(here / "prompts.jsonl", prompts)
    print(f"train={len(train)} val={len(val)} prompts={len(prompts)}")


if __name__ == "__main__":
    main()
