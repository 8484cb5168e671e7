static const char *open_brace(void) {
    /* returns "{" */
    return "{";
}

static void emit(char *out, const char *name) {
    sprintf(out, "} %s {", name);
}
