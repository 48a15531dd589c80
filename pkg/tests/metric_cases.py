"""Hand-built metric table: (metric, prediction, reference, expected).

Expected values are worked by hand from the definitions: normalize =
lowercase + strip punctuation + collapse whitespace; token F1 over bags;
keyword accuracy over the prediction token set; retrieval F1 over id sets.
"""

EM_CASES = [
    ("Red", "red", 1.0),
    ("red square", "red", 0.0),
    ("red.", "red", 1.0),
    ("  red  ", "red", 1.0),
    ("RED!!", "red", 1.0),
    ("", "", 1.0),
    ("", "red", 0.0),
    ("a b", "ab", 0.0),
    ("three,", "three", 1.0),
    ("don't", "dont", 1.0),
]

TOKEN_F1_CASES = [
    ("red square", "red square", 1.0),
    ("blue", "red", 0.0),
    ("two red squares", "red squares", 0.8),          # P=2/3, R=1
    ("", "", 1.0),
    ("", "red", 0.0),
    ("red", "", 0.0),
    ("red red", "red", 2.0 / 3.0),                    # bag: common=1, P=1/2, R=1
    ("the red square", "red", 0.5),                   # P=1/3, R=1
    ("Red Square!", "red square", 1.0),
    ("a b c", "b c d", 2.0 / 3.0),                    # P=R=2/3
]

# (prediction, keywords, expected)
KEYWORD_CASES = [
    ("red", ["red"], 1.0),
    ("blue", ["red"], 0.0),
    ("the shape is red", ["red"], 0.4),               # P=1/4, R=1
    ("red square", ["red", "square"], 1.0),
    ("red red", ["red"], 1.0),                        # token set collapses the repeat
    ("", ["red"], 0.0),
]

# (retrieved, gold, expected)
RETRIEVAL_F1_CASES = [
    (["a", "b"], ["a", "b"], 1.0),
    (["a", "b", "c", "d"], ["a"], 0.4),               # P=1/4, R=1
    (["x", "y"], ["a"], 0.0),
    (["a", "b"], ["a", "c"], 0.5),                    # P=R=1/2
]

assert len(EM_CASES) + len(TOKEN_F1_CASES) + len(KEYWORD_CASES) + len(RETRIEVAL_F1_CASES) == 30
