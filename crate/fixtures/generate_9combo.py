#!/usr/bin/env python3
"""Writes fixtures/muie-9combo: two instances (one shared, one specific) for
each of the 15 dataset cells across the nine modality combinations.

Images are 8x6, videos are 4 frames of 8x6 at 2 fps, audio clips are 10 s.
Media files are empty placeholders; only their metadata matters.
"""

import json
import os
import shutil

ROOT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "muie-9combo")
W, H = 8, 6

CELLS = [
    ("I", "NER", "PASCAL-C"),
    ("I", "RE", "VRD"),
    ("I", "EE", "imSitu"),
    ("V", "EE", "VidSitu"),
    ("A", "NER", "ACE05-Aud"),
    ("A", "RE", "ReTACRED"),
    ("T+I", "NER", "Twt17"),
    ("T+I", "RE", "MNRE"),
    ("T+I", "EE", "M2E2"),
    ("T+V", "EE", "VidSitu-Txt"),
    ("T+A", "NER", "ACE05-Aud"),
    ("T+A", "RE", "ReTACRED"),
    ("I+A", "RE", "MNRE-Aud"),
    ("T+I+A", "NER", "Twt17-Aud"),
    ("V+A", "EE", "VidSitu-Aud"),
]

PEOPLE = [
    ("Angela Merkel", "Donald Trump"),
    ("Lionel Messi", "Cristiano Ronaldo"),
    ("Marie Curie", "Pierre Curie"),
]
PLACES = ["Berlin", "Barcelona", "Paris"]


def rect_rle(x0, y0, x1, y1, w=W, h=H):
    """Row-major runs for the half-open rectangle [x0, x1) x [y0, y1)."""
    bits = [1 if x0 <= x < x1 and y0 <= y < y1 else 0 for y in range(h) for x in range(w)]
    runs, value, count = [], 0, 0
    for b in bits:
        if b == value:
            count += 1
        else:
            runs.append(count)
            value, count = b, 1
    runs.append(count)
    return runs


def slug(s):
    return "".join(c.lower() if c.isalnum() else "-" for c in s).strip("-")


class Grounder:
    """Hands out non-overlapping groundings for each modality present."""

    def __init__(self, modalities, seed):
        self.modalities = [m for m in ("image", "video", "audio") if m in modalities]
        self.next = seed % 3

    def make(self, link):
        i = self.next
        self.next += 1
        out = {}
        col = (i * 2) % (W - 2)
        if "image" in self.modalities:
            out["image"] = {"width": W, "height": H, "rle": rect_rle(col, 1, col + 2, 4)}
        if "video" in self.modalities:
            frames = {}
            for f in range(4):
                frames[str(f)] = {
                    "width": W,
                    "height": H,
                    "rle": rect_rle(min(col + f // 2, W - 2), 1, min(col + f // 2, W - 2) + 2, 5),
                }
            out["video"] = {"frames": frames}
        if "audio" in self.modalities:
            start = float((i * 3) % 9)
            out["audio"] = {"start": start, "end": start + 1.5}
        for g in out.values():
            if link is not None:
                g["link"] = link
        return out


def add(groundings, items):
    for modality, g in items.items():
        groundings.setdefault(modality, []).append(g)


def build(combo, task, dataset, n):
    modalities = {"T": "text", "I": "image", "V": "video", "A": "audio"}
    present = [modalities[c] for c in combo.split("+")]
    shared = n == 0
    a, b = PEOPLE[(hash_seed(dataset) + n) % len(PEOPLE)]
    place = PLACES[(hash_seed(dataset) + n) % len(PLACES)]
    grounder = Grounder(present, hash_seed(dataset) + n)
    groundings = {}
    grounded = [m for m in present if m != "text"]
    gold = {"format_version": 1, "task": task}

    if task == "NER":
        gold["entities"] = [
            {"surface": a, "label": "person"},
            {"surface": b, "label": "person"},
            {"surface": place, "label": "location"},
        ]
        add(groundings, grounder.make({"record": 0}))
        add(groundings, grounder.make({"record": 1}))
        text = f"{a} met {b} in {place} ."
    elif task == "RE":
        gold["relations"] = [
            {
                "subject": {"surface": a, "label": "person"},
                "relation": "peer",
                "object": {"surface": b, "label": "person"},
            },
            {
                "subject": {"surface": a, "label": "person"},
                "relation": "place_of_residence",
                "object": {"surface": place, "label": "location"},
            },
        ]
        add(groundings, grounder.make({"record": 0, "role": "subject"}))
        add(groundings, grounder.make({"record": 0, "role": "object"}))
        text = f"{a} and {b} , both living in {place} ."
    else:
        gold["events"] = [
            {
                "trigger": "met",
                "event_type": "Meet",
                "arguments": [
                    {"mention": a, "role": "Agent"},
                    {"mention": b, "role": "Target"},
                    {"mention": place, "role": "Place"},
                ],
            }
        ]
        add(groundings, grounder.make({"record": 0, "argument": 0}))
        add(groundings, grounder.make({"record": 0, "argument": 1}))
        text = f"{a} met {b} in {place} ."

    if not shared:
        # modality-specific content: one region with no text counterpart
        add(groundings, grounder.make(None))
    if grounded:
        gold["groundings"] = {m: groundings[m] for m in ("image", "audio", "video") if m in groundings}
    return present, text, gold, shared


def hash_seed(s):
    return sum(s.encode())


def main():
    if os.path.exists(ROOT):
        shutil.rmtree(ROOT)
    os.makedirs(os.path.join(ROOT, "gold"))
    os.makedirs(os.path.join(ROOT, "media"))
    for name in ("blank.png", "blank.mp4", "blank.wav"):
        open(os.path.join(ROOT, "media", name), "wb").close()

    lines = [json.dumps({"format_version": 1, "corpus": "muie-9combo", "version": "1"})]
    for combo, task, dataset in CELLS:
        for n in range(2):
            present, text, gold, shared = build(combo, task, dataset, n)
            iid = f"{slug(combo.replace('+', ''))}-{task.lower()}-{slug(dataset)}-{n}"
            gold = {"format_version": 1, "instance_id": iid, **{k: v for k, v in gold.items() if k != "format_version"}}
            gold_rel = f"gold/{iid}.json"
            with open(os.path.join(ROOT, gold_rel), "w") as f:
                f.write(json.dumps(gold, indent=2, ensure_ascii=False) + "\n")
            rec = {
                "instance_id": iid,
                "dataset": dataset,
                "modality_combo": combo,
                "task": task,
                "alignment": "shared" if shared else "specific",
            }
            if "text" in present:
                rec["text"] = text
            if "image" in present:
                rec["image"] = {"path": "media/blank.png", "width": W, "height": H}
            if "audio" in present:
                rec["audio"] = {"path": "media/blank.wav", "duration": 10.0}
            if "video" in present:
                rec["video"] = {"path": "media/blank.mp4", "frame_count": 4, "fps": 2.0, "width": W, "height": H}
            rec["gold"] = gold_rel
            lines.append(json.dumps(rec, ensure_ascii=False))
    with open(os.path.join(ROOT, "manifest.jsonl"), "w") as f:
        f.write("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
