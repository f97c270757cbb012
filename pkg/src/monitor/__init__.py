# Monitor package