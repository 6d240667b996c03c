from typing import List, Optional, Sequence

import torch
import torch.nn as nn

from app.core.exceptions import ParameterException, VocabularyException


class ConditionEmbedder(nn.Module):
    """
    Learned token table over the category vocabulary plus a pad row and a null row

    Stands in for a text encoder: a prompt is a list of category names, each
    name is one token, and prompts are padded to a fixed length K.
    """

    def __init__(self, vocabulary: Sequence[str], tokens: int, embed_dim: int):
        super().__init__()
        if len(set(vocabulary)) != len(vocabulary):
            raise ParameterException("Vocabulary entries must be unique")
        self.vocabulary: List[str] = list(vocabulary)
        self.index = {name: i for i, name in enumerate(self.vocabulary)}
        self.tokens = tokens
        self.embed_dim = embed_dim
        self.pad_index = len(self.vocabulary)
        self.null_index = len(self.vocabulary) + 1
        self.table = nn.Embedding(len(self.vocabulary) + 2, embed_dim)

    def token_ids(self, categories: Optional[Sequence[str]]) -> torch.Tensor:
        """Token ids of length K; None or an empty list selects the null condition"""
        if not categories:
            return torch.full((self.tokens,), self.null_index, dtype=torch.long)

        unknown = [name for name in categories if name not in self.index]
        if unknown:
            raise VocabularyException(f"Unknown category name(s): {', '.join(unknown)}", errors=unknown)
        if len(categories) > self.tokens:
            raise ParameterException(f"Prompt has {len(categories)} categories but only {self.tokens} tokens fit")

        ids = torch.full((self.tokens,), self.pad_index, dtype=torch.long)
        ids[:len(categories)] = torch.tensor([self.index[name] for name in categories], dtype=torch.long)
        return ids

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.table(ids)
