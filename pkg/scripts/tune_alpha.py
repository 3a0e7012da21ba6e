"""Pick the toy step size on a tuning seed range disjoint from the pinned ROC set.

Rule: among alphas whose energy traces are non-increasing in at least 99% of
tuning scenarios, take the one with the best accuracy at T=tmax (ties go to
the smaller alpha). Prints descent rate and accuracy at every T, plus mean
relevancy when --relevancy is given.

    python scripts/tune_alpha.py --energy hard --alphas 2,4,8,16,32,64
    python scripts/tune_alpha.py --energy soft --prompt point --alphas 0.25,0.5,1,2,4
"""
import argparse

import numpy as np

from latentsteer.harness import gen_scenario, steering_prompt
from latentsteer.model import (DEFAULT_WEIGHTS, encode_image, encode_text, forward_with_attention,
                               load_weights)
from latentsteer.relevancy import relevancy_map, relevancy_score
from latentsteer.steering import SteeringConfig, steer

MIN_DESCENT = 0.99


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--weights", default=DEFAULT_WEIGHTS)
    ap.add_argument("--energy", default="hard", choices=("hard", "soft"))
    ap.add_argument("--prompt", default="box", choices=("box", "mask", "scribble", "point"))
    ap.add_argument("--alphas", default="2,4,8,16,32,64")
    ap.add_argument("--start", type=int, default=10_000)
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--tmax", type=int, default=4)
    ap.add_argument("--relevancy", action="store_true")
    args = ap.parse_args()
    w = load_weights(args.weights)
    Ts = range(args.tmax + 1)
    method = f"steer-{args.energy}"
    best = None
    for alpha in (float(a) for a in args.alphas.split(",")):
        acc = np.zeros((args.n, len(Ts)))
        rel = np.zeros_like(acc)
        descent = 0
        for i, seed in enumerate(range(args.start, args.start + args.n)):
            sc = gen_scenario(seed, w.config, args.prompt)
            prompt, mask = steering_prompt(sc, method)
            q = list(sc.question)
            e_v, e_t = encode_image(sc.image, w), encode_text(q, w)
            a, b = sc.candidates
            for T in Ts:
                cfg = SteeringConfig(T=T, alpha=alpha, energy=args.energy)
                st = steer(sc.image, q, prompt, w, cfg, mask=mask)
                logits, _ = forward_with_attention(e_v, st.p_v, e_t, w)
                acc[i, T] = (a if logits[a] >= logits[b] else b) == sc.answer
                if args.relevancy:
                    rel[i, T] = relevancy_score(relevancy_map(sc.image, q, w, st), sc.region)
                if T == args.tmax:
                    descent += st.trace.is_non_increasing()
        rate = descent / args.n
        final = acc.mean(0)[-1]
        print(f"alpha={alpha:g} descent={rate:.3f}")
        print("  acc", np.round(acc.mean(0), 3))
        if args.relevancy:
            print("  rel", np.round(rel.mean(0), 4))
        if rate >= MIN_DESCENT and (best is None or final > best[1]):
            best = (alpha, final)
    print("selected:", "none" if best is None else f"alpha={best[0]:g} (acc {best[1]:.3f})")


if __name__ == "__main__":
    main()
