"""Shape/texture allocation, texture detectors and shape bias for several encoders on one seed."""
import argparse
import logging

from shapeprobe.experiments import default_sections, shape_bias, stage_allocations, texture_count_comparison, \
    trained_encoder


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    sec = default_sections()

    encoders = (("tiny_resnet", 3), ("tiny_bagnet", 5), ("tiny_bagnet", 3))
    cmp_, _, _ = texture_count_comparison(sec, args.seed, encoders)
    print("encoder                 texture detectors  texture dims")
    for r in cmp_["rows"]:
        print(f"{r['encoder']:<24}{r['texture_detectors']:>17}{r['texture_dims']:>14}")
    print(f"spearman {cmp_['spearman']:.3f}")

    for stylized in (False, True):
        _, _, h = trained_encoder(sec, args.seed, stylized_training=stylized)
        alloc = stage_allocations(h, sec, ["f4"])[0][0]
        bias = shape_bias(sec, args.seed, stylized)
        sb = "undefined" if bias.shape_bias is None else f"{bias.shape_bias:.3f}"
        print(f"stylized={stylized}: shape dims {alloc.counts['shape']}, shape bias {sb}")


if __name__ == "__main__":
    main()
