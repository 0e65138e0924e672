import torch

# keep CPU math cheap and repeatable across test machines
torch.set_num_threads(2)
