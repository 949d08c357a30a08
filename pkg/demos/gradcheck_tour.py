"""Finite-difference checks on a few primitives and the composed tokenizer loss."""

from vfmtok.suite import check_ar_loss, check_primitive, check_tokenizer_loss

for name in ("matmul", "softmax", "layernorm", "bilinear_sample", "straight_through", "rope2d"):
    print(f"{name:<18} max rel err {max(check_primitive(name, s) for s in range(3)):.2e}")

worst, details = check_tokenizer_loss(seed=0)
print(f"tokenizer loss     max rel err {worst:.2e} over {len(details)} parameter tensors")
print(f"AR loss            max rel err {check_ar_loss(seed=0)[0]:.2e}")
