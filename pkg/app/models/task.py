from typing import List, Literal

from pydantic import BaseModel, Field


class Problem(BaseModel):
    prompt: List[int]
    cot: List[int]
    value: List[int]


class Dataset(BaseModel):
    split: Literal["train", "bench"]
    name: str
    seed: int
    problems: List[Problem] = Field(default_factory=list)

    def __len__(self) -> int:
        return len(self.problems)
