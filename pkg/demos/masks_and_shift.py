"""
Group masks and long-distance inputs
====================================

A semi-autoregressive decoder produces K tokens per step.  Two small pieces
make that possible: a mask that lets every position see its whole group, and
an input shift of K so that no position is fed a token from its own group.
"""

from satnmt import masks

# positions 0..5 split into groups of two
part = masks.partition_groups(6, 2)
print("groups:", [list(g) for g in part.groups])

# the strict mask is the usual lower triangle
print("strict")
for row in masks.strict_causal_mask(6).int().tolist():
    print(" ", "".join(map(str, row)))

# the relaxed mask opens each group to itself: a staircase with steps of K
print("relaxed, K=2")
for row in masks.relaxed_causal_mask(6, 2).int().tolist():
    print(" ", "".join(map(str, row)))

# with K=1 the two masks coincide
assert (masks.relaxed_causal_mask(6, 1) == masks.strict_causal_mask(6)).all()

# decoder inputs are the targets delayed by K, padded with <s>
y = ["a", "b", "c", "d", "e", "f"]
for K in (1, 2, 3):
    print(f"K={K} inputs:", masks.shift_targets(y, K, "<s>"))
