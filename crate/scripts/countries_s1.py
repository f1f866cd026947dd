#!/usr/bin/env python3
"""Build a Countries-S1 style split from the `world-countries` npm package.

Usage: countries_s1.py path/to/countries.json out_dir [seed]

Entities are lower-cased names with spaces replaced by underscores. Facts:
  country   locatedin  subregion
  country   locatedin  region
  subregion locatedin  region
  country   neighborof country
24 validation and 24 test countries are drawn (each with at least one
neighbour that stays in the training set). Their country->region facts are
removed from training and form the validation/test splits.
"""
import json
import random
import sys


def norm(s):
    return s.strip().lower().replace(" ", "_")


def main():
    src, out = sys.argv[1], sys.argv[2]
    seed = int(sys.argv[3]) if len(sys.argv) > 3 else 1234
    data = json.load(open(src, encoding="utf-8"))
    by_code = {c["cca3"]: c for c in data}
    name = {c["cca3"]: norm(c["name"]["common"]) for c in data}

    located, neighbors = [], set()
    sub_region = {}
    for c in data:
        n, reg, sub = name[c["cca3"]], norm(c["region"]), norm(c["subregion"])
        if sub:
            located.append((n, sub))
            sub_region[sub] = reg
        if reg:
            located.append((n, reg))
        for b in c["borders"]:
            if b in by_code:
                neighbors.add((n, name[b]))
    located += sorted(sub_region.items())

    rng = random.Random(seed)
    codes = sorted(name.values())
    rng.shuffle(codes)
    region_of = {name[c["cca3"]]: norm(c["region"]) for c in data}
    held = []
    for c in codes:
        if len(held) == 48:
            break
        nbrs = [b for (a, b) in neighbors if a == c and b not in held]
        if nbrs and region_of[c]:
            held.append(c)
    valid, test = held[:24], held[24:]
    held_set = set(held)

    train = [(h, "locatedin", t) for (h, t) in located
             if not (h in held_set and t == region_of[h])]
    train += [(h, "neighborof", t) for (h, t) in sorted(neighbors)]
    splits = {
        "train": train,
        "valid": [(c, "locatedin", region_of[c]) for c in valid],
        "test": [(c, "locatedin", region_of[c]) for c in test],
    }
    for split, triples in splits.items():
        with open(f"{out}/{split}.txt", "w", encoding="utf-8") as f:
            for h, r, t in triples:
                f.write(f"{h}\t{r}\t{t}\n")


if __name__ == "__main__":
    main()
