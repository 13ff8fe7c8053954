"""Application package"""
