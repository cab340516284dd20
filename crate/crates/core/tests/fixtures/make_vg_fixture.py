"""Writes vg_scenes.jsonl: 20 small scenes in the Visual Genome layout.

Deterministic (fixed seed). A few scenes are deliberately too small, carry
overlapping duplicate objects, noisy casing, reserved characters or
overlong labels so every curation stage has something to do.
"""
import json
import random

rng = random.Random(20240611)

NAMES = ["man", "woman", "table", "chair", "lamp", "window", "tree", "dog",
         "cup", "plate", "car", "building", "sign", "shirt", "bench", "sky"]
ATTRS = ["red", "blue", "white", "black", "wooden", "tall", "small", "large",
         "green", "old", "shiny", "open"]
PREDS = ["on", "near", "next to", "behind", "under", "holding", "wearing",
         "in front of", "has", "above"]

scenes = []
next_obj = 1000
for s in range(20):
    n = rng.randint(5, 11)
    if s in (3, 11):
        n = 3  # too small
    objects = []
    for _ in range(n):
        x, y = rng.randint(0, 400), rng.randint(0, 300)
        w, h = rng.randint(20, 200), rng.randint(20, 200)
        attrs = rng.sample(ATTRS, rng.choice([0, 0, 1, 1, 2]))
        objects.append({"object_id": next_obj, "x": x, "y": y, "w": w, "h": h,
                        "names": [rng.choice(NAMES)], "attributes": attrs})
        next_obj += 1
    if s % 4 == 1:
        # duplicate annotation of the first object, nearly the same box
        o = objects[0]
        objects.append({"object_id": next_obj, "x": o["x"] + 2, "y": o["y"] + 1,
                        "w": o["w"], "h": o["h"], "names": [o["names"][0].upper()],
                        "attributes": ["Shiny"]})
        next_obj += 1
    if s % 5 == 2:
        objects[-1]["attributes"].append("very old and worn")
        objects[0]["names"] = ["  Table  "]
    if s == 7:
        objects[1]["attributes"].append("red, blue")
    if s == 9:
        objects.append({"object_id": next_obj, "x": 5, "y": 5, "w": 0, "h": 10,
                        "names": ["ghost"], "attributes": []})
        next_obj += 1
    rels = []
    seen = set()
    for _ in range(rng.randint(n, 2 * n)):
        a, b = rng.sample(range(n), 2)
        p = rng.choice(PREDS)
        if (a, b, p) in seen:
            continue
        seen.add((a, b, p))
        rels.append({"relationship_id": len(rels), "predicate": p.upper() if rng.random() < 0.1 else p,
                     "subject_id": objects[a]["object_id"], "object_id": objects[b]["object_id"]})
    if s == 13:
        rels.append({"relationship_id": len(rels), "predicate": "zorblax",
                     "subject_id": objects[0]["object_id"], "object_id": objects[1]["object_id"]})
    scenes.append({"image_id": 2300 + s,
                   "url": f"https://example.org/vg/{2300 + s}.jpg",
                   "objects": objects, "relationships": rels})

with open("vg_scenes.jsonl", "w") as f:
    for sc in scenes:
        f.write(json.dumps(sc, sort_keys=True) + "\n")

with open("pos_lexicon.jsonl", "w") as f:
    for tok, tag in [("red", "JJ"), ("blue", "JJ"), ("wooden", "JJ"), ("open", "JJ"),
                     ("shiny", "JJ"), ("has", "VBZ"), ("holding", "VBG"), ("wearing", "VBG"),
                     ("on", "IN"), ("near", "IN"), ("behind", "IN"), ("under", "IN"),
                     ("above", "IN"), ("front", "NN"), ("next to", "IN"), ("in front of", "IN"),
                     ("old", "JJ"), ("small", "JJ"), ("large", "JJ"), ("tall", "JJ"),
                     ("green", "JJ"), ("white", "JJ"), ("black", "JJ")]:
        f.write(json.dumps({"token": tok, "tag": tag}) + "\n")
