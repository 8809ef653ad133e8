"""
The synthetic grounded world
============================

All experiments run against a generated world of scenes: each scene is a set
of objects with a type, a color and a location. A scene yields an image (rows
of one-hot attribute features plus a noisy global sum) and a caption; task
datasets derive from the same scenes, tagging each sample with whether its
answer survives in the text or was elided and is only recoverable visually.
"""

from visfuse.synthworld import (gen_imagebase, gen_nli_dataset, gen_rc_dataset,
                                scenes_from_records, world_vocab)

records, feats = gen_imagebase(seed=11, m=6)
scenes = scenes_from_records(records)

print("imagebase of", len(records), "records")
for rec, scene in zip(records[:3], scenes[:3]):
    print(f"  record {rec.id}: {rec.caption}")
    print(f"    objects: " + "; ".join(
        f"{o.color} {o.type} at {o.location}" for o in scene.objects))
    print(f"    feature rows {rec.features.shape}, global {feats[rec.id].global_feat.shape}")

# ---------------------------------------------------------------------------
# NLI samples: premise = caption minus one attribute, hypothesis asserts one.
# When the asserted attribute is the elided one, text alone cannot answer.

nli = gen_nli_dataset(seed=3, n=6, records=records)
names = {0: "entail", 1: "contradict", 2: "neutral"}
print("\nNLI samples")
for s in nli:
    tag = "visual" if s.visual_dependent else "text  "
    print(f"  [{tag}] {names[s.label]:10s} P: {s.premise}")
    print(f"           {'':10s} H: {s.hypothesis}")

# ---------------------------------------------------------------------------
# RC samples: a multi-scene passage, a typed question, three choices.

rc = gen_rc_dataset(seed=4, n=4, records=records)
print("\nRC samples")
for s in rc:
    tag = "visual" if s.visual_dependent else "text  "
    print(f"  [{tag}] ({s.question_type}) {s.question}")
    print(f"           passage: {s.passage}")
    print(f"           choices: {s.choices}  answer: {s.choices[s.label]}")

# ---------------------------------------------------------------------------
# The shared vocabulary covers every word either task can emit.

vocab = world_vocab()
print("\nvocab size:", vocab.size)
print("sample encoding:", vocab.encode_text(nli[0].hypothesis))
