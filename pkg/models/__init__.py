"""Models package"""
