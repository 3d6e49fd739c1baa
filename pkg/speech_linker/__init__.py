"""
Speech Entity Linker

Three-stage entity recognition and linking for spoken-language transcripts:
dense candidate retrieval, knowledge-enhanced CRF tagging, and candidate
ranking with NIL/ERROR sentinels.
"""

__version__ = "1.0.0"
