int copy(char *dst, const char *src)
{
    strcpy(dst, src);
    return 0;
}

int helper(int x)
{
    return x * 2;
}
