"""Regenerates the manifest fixture and its expected filter results.

    python3 make_manifest.py
"""
import json
import random

rng = random.Random(20240611)

def pick(edge, lo, hi):
    return rng.choice(edge) if rng.random() < 0.3 else rng.uniform(lo, hi)

records = []
for i in range(1000):
    records.append({
        "clip_id": f"clip-{i:04d}",
        "duration_s": round(pick([10.0, 9.999, 10.001], 2.0, 40.0), 3),
        "fps": rng.choice([24.0, 25.0, 30.0]),
        "height_px": rng.choice([360, 480, 720]),
        "sample_rate_hz": rng.choice([16000, 44100]),
        "sync_offset_frames": rng.choice([-4, -3, -2, 0, 1, 3, 4, 7]),
        "sync_confidence": round(pick([1.5, 1.4999, 1.5001], 0.0, 4.0), 4),
        "aesthetic_score": round(pick([0.3, 0.2999, 0.3001], 0.0, 1.0), 4),
        "speaker_count": rng.choice([0, 1, 1, 1, 2, 3]),
    })

def reason(r):
    if r["speaker_count"] != 1:
        return "speaker_count"
    if abs(r["sync_offset_frames"]) > 3:
        return "sync_offset"
    if not r["sync_confidence"] > 1.5:
        return "sync_confidence"
    if r["aesthetic_score"] < 0.3:
        return "aesthetic_score"
    if r["duration_s"] < 10.0:
        return "duration"
    return None

with open("manifest.jsonl", "w") as f:
    for r in records:
        f.write(json.dumps(r) + "\n")
with open("expected_kept.txt", "w") as f:
    for r in records:
        if reason(r) is None:
            f.write(r["clip_id"] + "\n")
with open("expected_rejected.tsv", "w") as f:
    f.write("clip_id\treason\n")
    for r in records:
        if reason(r) is not None:
            f.write(f"{r['clip_id']}\t{reason(r)}\n")
