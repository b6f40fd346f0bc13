"""Hand-worked rate updates for the declared RTT-gradient rule.

Defaults: alpha 0.46, beta 0.26, delta 10 Mbit/s, t_low 50 us,
t_high 1000 us, min_rtt 20 us, hai after 5 samples at 5x delta,
rate clamped to [100 Mbit/s, 25 Gbit/s].  Each expected value below is
written out step by step rather than computed by a model of the rule.
"""

G = 1e9
M = 1e6

# (name, knob overrides, starting rate, rtt samples in us, expected final rate, expected updates)
VECTORS = [
    ("bypass on uncongested session", {}, 25 * G, [40.0], 25 * G, 0),
    ("low rtts keep link rate", {}, 25 * G, [10.0] * 100, 25 * G, 0),
    ("above t_high: 10G at 2*t_high", {}, 10 * G, [2000.0],
     10 * G * (1 - 0.26 * (1 - 1000 / 2000)), 1),
    ("below t_low while congested", {}, 5 * G, [30.0], 5 * G + 10 * M, 1),
    # 100: diff 0 -> avg 0 -> g 0 -> +delta; 120: diff 20 -> avg 0.46*20 = 9.2 -> g 0.46
    ("positive gradient", {}, 10 * G, [100.0, 120.0],
     (10 * G + 10 * M) * (1 - 0.26 * (0.46 * 20 / 20)), 2),
    # 200: +delta (run 1); 150: avg -23 -> g < 0 -> +delta (run 2)
    ("negative gradient", {}, 10 * G, [200.0, 150.0], 10 * G + 2 * 10 * M, 2),
    # six flat samples: four single steps, then the fifth and sixth at 5x
    ("hyper additive increase", {}, 10 * G, [100.0] * 6, 10 * G + 4 * 10 * M + 2 * 5 * 10 * M, 6),
    # 200M*0.7426 = 148.52M, *0.7426 = 110.29M, *0.7426 = 81.9M -> clamped
    ("clamp at min rate", {}, 200 * M, [100_000.0] * 3, 100 * M, 3),
    ("clamp at link rate", {}, 25 * G - 5 * M, [10.0], 25 * G, 1),
    # 300: +delta -> 8.01G; 400: avg 46, g 2.3; 350: avg 0.54*46 - 0.46*50 = 1.84, g 0.092
    ("ewma chain", {}, 8 * G, [300.0, 400.0, 350.0],
     (8 * G + 10 * M) * (1 - 0.26 * 2.3) * (1 - 0.26 * 0.092), 3),
]
