"""Writes ref_dvt_4x4x8.raif with an independent little-endian encoder.

Vectors are L2-normalized in float64 then stored as float32; the first
vector is also recorded in ref_dvt_4x4x8.expected.json.
"""
import json
import math
import struct

ROWS, COLS, DIM = 4, 4, 8

vectors = []
for p in range(ROWS * COLS):
    v = [math.cos(0.3 * p + 0.9 * k) + 0.05 * k for k in range(DIM)]
    n = math.sqrt(sum(x * x for x in v))
    vectors.append([x / n for x in v])

with open("ref_dvt_4x4x8.raif", "wb") as fh:
    fh.write(b"RAIF")
    fh.write(struct.pack("<HHHI", 1, ROWS, COLS, DIM))
    for v in vectors:
        fh.write(struct.pack("<%df" % DIM, *v))

with open("ref_dvt_4x4x8.raif.json", "w") as fh:
    json.dump({"image_id": "ref_dvt", "provider": "dvt-export", "patch_size": 16}, fh)
    fh.write("\n")

first = list(struct.unpack("<%df" % DIM, struct.pack("<%df" % DIM, *vectors[0])))
with open("ref_dvt_4x4x8.expected.json", "w") as fh:
    json.dump({"rows": ROWS, "cols": COLS, "dim": DIM, "first_vector": first}, fh, indent=1)
    fh.write("\n")
