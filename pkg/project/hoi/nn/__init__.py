"""
Small numpy network stack: autodiff engine, layers, optimizer and the
tokenizer, language-model and matcher architectures built on it.
"""
