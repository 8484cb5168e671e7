#define LIMIT 10

int limit(void) {
    return LIMIT;
}
