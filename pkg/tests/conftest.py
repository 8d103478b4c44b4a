import torch


def zero_all_parameters(model):
    """All-zero weights give exactly uniform next-token distributions."""
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    return model


def randomize_adapters(model, seed=0, std=0.05):
    """Move the adapter factors off their zero init so gradients are generic."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith(("lora_a", "lora_b")):
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)
    return model
