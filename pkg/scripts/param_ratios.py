"""Trainable-parameter share of each PEFT kind at BERT-base dimensions."""
from clearlab.model import BERT_BASE, ModelConfig, count_parameters


def main():
    print(f"{'kind':<8} {'delta':>10} {'total':>12} {'share':>8}")
    for kind in ("adapter", "lora", "bitfit", "prompt"):
        c = count_parameters(ModelConfig(**BERT_BASE, num_classes=2, peft_kind=kind))
        print(f"{kind:<8} {c['delta']:>10,} {c['total']:>12,} {100 * c['delta'] / c['total']:>7.3f}%")


if __name__ == "__main__":
    main()
