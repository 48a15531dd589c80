"""Desk-scale multimodal retrieval-augmented generation.

A shared transformer encoder embeds queries and (image, text) memory
entries into one vector space, an exact inner-product index retrieves
top-K entries, and a decoder generates answers conditioned on the
retrieval-augmented encoding.
"""

__version__ = "0.1.0"
