"""Walk one OSM extract through parsing, framing and SD tokenization.

Run: python demos/osm_to_tokens.py
"""

from pathlib import Path

import numpy as np

from sdprior.osm import NEAR, EgoPose, parse_osm_xml, project_to_frame
from sdprior.sd_encoder import SdEncoderConfig, frame_tokens

FIXTURE = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "valid.osm"

elements = parse_osm_xml(FIXTURE.read_bytes())
print(f"parsed {len(elements)} OSM elements")

# ego at the start of the residential way, looking east
frame = project_to_frame(elements, EgoPose(0.0, 0.0, 0.0), NEAR, n_points=10)
for e in frame.elements:
    where = "" if e.xy is None else f"first point {np.round(e.xy[0], 2).tolist()}"
    print(f"  {e.id:<4} {e.kind:<9} tags={dict(e.tags)} {where}")

cfg = SdEncoderConfig()
tokens, orf = frame_tokens(frame, cfg, seed=0)
print(f"{len(tokens)} tokens, kinds {sorted(set(tokens.kinds))}")
print(f"identifier rows for {orf.ids}: max |Gram - I| = {np.abs(orf.rows @ orf.rows.T - np.eye(len(orf.ids))).max():.1e}")
