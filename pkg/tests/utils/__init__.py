from .datasets import (
    finite_difference_grad,
    make_network,
    synthetic_digits,
    write_digit_files,
    write_idx,
    IDX_IMAGE_MAGIC,
    IDX_LABEL_MAGIC
)

__all__ = [
    'finite_difference_grad',
    'make_network',
    'synthetic_digits',
    'write_digit_files',
    'write_idx',
    'IDX_IMAGE_MAGIC',
    'IDX_LABEL_MAGIC'
]
