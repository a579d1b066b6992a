"""Head and LoRA parameter counts at full w2v-BERT 2.0 scale (24 layers, 1024 dims).

The closed forms are the ones the unit tests check against instantiated modules.
Published figures: MFA 65.6M, Adapter+MFA 6.2M, LoRA+Adapter+MFA 12.5M while frozen.

    python3 scripts/paper_scale_counts.py
"""

from svforge.heads import head_param_count, lora_param_count

LAYERS, DIM = 24, 1024


def main():
    n_out = LAYERS + 1  # h_0 .. h_L
    print(f"{'head':<14}{'attention':<11}{'params (M)':>11}")
    for kind in ("mfa", "adapter_mfa"):
        for att in ("shared", "channel"):
            print(f"{kind:<14}{att:<11}{head_param_count(kind, n_out, DIM, attention=att) / 1e6:>11.2f}")
    base = head_param_count("adapter_mfa", n_out, DIM, attention="channel")
    print(f"\n{'LoRA rank':<10}{'LoRA (M)':>10}{'+ Adapter+MFA (M)':>20}")
    for r in (8, 16, 32, 64):
        n = lora_param_count(LAYERS, DIM, r)
        print(f"{r:<10}{n / 1e6:>10.2f}{(n + base) / 1e6:>20.2f}")


if __name__ == "__main__":
    main()
