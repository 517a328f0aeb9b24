"""Networked time series forecasting with stacked recurrent blocks and neighbor attention."""
