from pkg import mod_0


def main():
    print(mod_0)


if __name__ == '__main__':
    main()
