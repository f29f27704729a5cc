"""Binary files, dataset and checkpoint stores, figures"""
