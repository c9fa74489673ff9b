"""
Filling missing entries with a learnable prompt
===============================================

A record is a matrix of values plus a 0/1 mask. The prompt holds one
learnable number per feature and is written into every masked cell.
"""

import numpy as np

from prompt_impute import autodiff as ad
from prompt_impute.prompt import FeaturePrompt, fill_prompt

X = ad.tensor([3, 2], [1.0, 0.0,
                       0.0, 4.0,
                       2.5, 0.0])
M = np.array([[1, 0],
              [0, 1],
              [1, 0]])
prompt = FeaturePrompt([9.0, 7.0])

filled = fill_prompt(X, M, prompt)
print("filled record:")
print(filled.data)

# any downstream loss sends gradient back to the prompt, summed over the
# cells each feature fills
loss = (filled * filled).sum()
ad.backward(loss)
print("d loss / d prompt:", prompt.v.grad)   # feature 0 fills one cell, feature 1 two

# with a zero prompt the fill is exactly the zero-imputed matrix
zero = fill_prompt(X, M, FeaturePrompt(np.zeros(2)))
print("zero prompt:", zero.data.tolist())
