#!/usr/bin/env python3
"""Writes the byte fixtures in this directory from first principles (struct.pack)."""
import json
import os
import struct

HERE = os.path.dirname(os.path.abspath(__file__))


def tensor_bytes(shape, values):
    out = b"STAN" + struct.pack("<HBB", 1, 0, len(shape))
    out += b"".join(struct.pack("<I", d) for d in shape)
    out += b"".join(struct.pack("<f", v) for v in values)
    return out


def write(name, data):
    with open(os.path.join(HERE, name), "wb") as f:
        f.write(data)


TENSOR = ([2, 3], [0.0, -1.5, 3.25, 0.1, -0.0, 65504.0])
write("tensor_2x3.stt", tensor_bytes(*TENSOR))

records = [("a", [3], [1.0, 2.0, -3.0]), ("head.w", [1, 2], [0.5, -0.25])]
ck = b""
for name, shape, values in records:
    raw = name.encode("utf-8")
    ck += struct.pack("<I", len(raw)) + raw + tensor_bytes(shape, values)
ck += struct.pack("<I", 0)
trailer = {"format": "stan-checkpoint", "seed": 7}
ck += (json.dumps(trailer, indent=2, sort_keys=True) + "\n").encode("utf-8")
write("checkpoint.sck", ck)

rows = [
    ("images/c0_0.stt", 0, 0, "1.5"),
    ("dir,with comma/x.stt", 1, 0, "-0.25"),
    ('quote"d.stt', -1, 2, "0"),
    ("images/c5_1.stt", -1, 1, "3.14159274"),
]


def field(s):
    if any(c in s for c in ',"\n\r'):
        return '"' + s.replace('"', '""') + '"'
    return s


csv = "path,true_label,pred_label,score\n"
csv += "".join(f"{field(p)},{t},{q},{s}\n" for p, t, q, s in rows)
write("scores.csv", csv.encode("utf-8"))
