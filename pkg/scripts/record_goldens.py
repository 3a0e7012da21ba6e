"""Record regression goldens into tests/data/golden.json.

Run once after a verified change to the model or harness; the test suite
compares against the stored values.
"""
import hashlib
import json
import tempfile
from pathlib import Path

import numpy as np

from latentsteer.harness import (apply_color_baseline, emit_heatmap, gen_scenario, run_roc,
                                 single_object_accuracy)
from latentsteer.model import (ModelConfig, SyntheticImage, encode_image, forward_with_attention,
                               encode_text, init_weights, load_default_weights)
from latentsteer.relevancy import relevancy_map
from latentsteer.steering import SteeringConfig, steer

OUT = Path(__file__).resolve().parents[1] / "tests" / "data" / "golden.json"


def seeded_image(cfg: ModelConfig) -> SyntheticImage:
    rng = np.random.default_rng(99)
    return SyntheticImage(rng.random((cfg.grid_h, cfg.grid_w, cfg.n_channels)))


def main():
    w = load_default_weights()
    cfg = w.config
    sc = gen_scenario(0, cfg)
    img = seeded_image(cfg)
    e_v = encode_image(img, init_weights(ModelConfig(seed=0)))
    logits, _ = forward_with_attention(encode_image(sc.image, w), None,
                                       encode_text(sc.question, w), w)
    rel = relevancy_map(sc.image, sc.question, w)
    state = steer(sc.image, sc.question, sc.prompt, w, SteeringConfig())
    with tempfile.TemporaryDirectory() as tmp:
        pgm, _ = emit_heatmap(rel, (cfg.grid_h, cfg.grid_w), Path(tmp) / "rel.pgm")
        pgm_sha = hashlib.sha256(pgm.read_bytes()).hexdigest()
    report = run_roc(w, ("none",), 200, SteeringConfig())
    golden = {
        "weights_sha256": w.checksum(),
        "single_object_accuracy": single_object_accuracy(w),
        "scenario0_image_sha256": sc.image.checksum(),
        "scenario0_color_sha256": apply_color_baseline(sc.image, sc.region).checksum(),
        "seeded_image_e_v_row0": e_v[0].tolist(),
        "seeded_image_e_v_sum": float(e_v.sum()),
        "scenario0_logits": logits.tolist(),
        "scenario0_relevancy": rel.tolist(),
        "scenario0_relevancy_pgm_sha256": pgm_sha,
        "scenario0_steer_energies": state.trace.energies,
        "scenario0_steer_ratios": state.trace.ratios,
        "roc_none_accuracy": report.accuracy("none"),
    }
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps(golden, indent=1, sort_keys=True) + "\n")
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()
